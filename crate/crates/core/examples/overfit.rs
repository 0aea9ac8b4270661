//! Desk-scale overfit run on synthetic phantoms.
//!
//! Usage: `cargo run --release --example overfit -- [steps] [config.toml]`

use std::time::Instant;

use deformseg::engine::{score_dataset, Dataset, Predictor, TrainState};
use deformseg::metrics::ms_ssim;
use deformseg::TrainConfig;

fn main() -> deformseg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut config = match args.get(2) {
        Some(path) => TrainConfig::load(path.as_ref())?,
        None => TrainConfig::default(),
    };
    if let Some(steps) = args.get(1) {
        config.steps = steps.parse().expect("steps must be an integer");
    }
    let data = Dataset::synthetic(8, config.image_size, 1, 100)?;
    let mut state = TrainState::<f32>::new(&config)?;
    let start = Instant::now();
    let records = state.run(&data, |st, r| {
        if st.step % 50 == 0 {
            eprintln!(
                "step {:5} {:7.1}s cyc {:.4} idt {:.4} seg {:.4} reg {:.4} art {:.4} adv {:.3}/{:.3}",
                st.step,
                start.elapsed().as_secs_f64(),
                r.cyc,
                r.idt,
                r.seg,
                r.reg,
                r.art,
                r.adv_dis,
                r.adv_gen
            );
        }
        Ok(())
    })?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} steps in {secs:.1}s ({:.3} s/step)",
        records.len(),
        secs / records.len().max(1) as f64
    );
    let predictor = Predictor::new(config.clone(), state.model);
    let rows = score_dataset(&predictor, &data)?;
    let fg: f64 = rows.iter().map(|r| r.foreground_dsc()).sum::<f64>() / rows.len() as f64;
    let corrected: f64 = rows.iter().map(|r| r.ms_ssim).sum::<f64>() / rows.len() as f64;
    let mut input = 0.0;
    for p in &data.pairs {
        input += ms_ssim(&p.corrupted.center(), &p.clean.center())?;
    }
    input /= data.len() as f64;
    println!("foreground dsc {fg:.4}  ms-ssim corrected {corrected:.4} input {input:.4}");
    Ok(())
}
