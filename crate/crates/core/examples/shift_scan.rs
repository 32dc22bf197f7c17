//! Layer-1 vs layer-K adapter shift after ten local epochs on client 0,
//! across backbone offsets and seeds.
//!
//! cargo run --release -p fedsca-core --example shift_scan -- 0.05,0.1,0.5,2

use fedsca_core::client::{evaluate_model, measure_param_shift};
use fedsca_core::orchestrator::build_clients;
use fedsca_core::{ExperimentConfig, Result};

fn main() -> Result<()> {
    let offsets: Vec<f64> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "0.1".into())
        .split(',')
        .map(|v| v.parse().expect("offsets are numbers"))
        .collect();
    for offset in offsets {
        let mut ordered = 0;
        let mut ratios = Vec::new();
        let mut fresh_iou = 0.0;
        for seed in 0..10u64 {
            let mut cfg = ExperimentConfig::default().with_seed(seed);
            cfg.backbone.offset = offset;
            let mut clients = build_clients(&cfg)?;
            for c in &clients {
                fresh_iou += evaluate_model(&c.model, &c.dataset.test)?.0 / (10.0 * clients.len() as f64);
            }
            let client = &mut clients[0];
            let before = client.model.adapter_params();
            for epoch in 1..=10 {
                client.local_train_round(epoch)?;
            }
            let shift = measure_param_shift(&before, &client.model.adapter_params())?;
            let (low, high) = (shift[0], shift[shift.len() - 1]);
            ordered += (low < high) as usize;
            ratios.push(format!("{:.3}", high / low));
        }
        println!("offset {offset}: fresh IoU {fresh_iou:.3}, layer 1 < layer K in {ordered}/10 seeds, K/1 ratios {ratios:?}");
    }
    Ok(())
}
