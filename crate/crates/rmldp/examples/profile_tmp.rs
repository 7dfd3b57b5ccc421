use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rmldp::harness::{prepare, ExperimentConfig};
use rmldp::meta::{self, Ablation, ModulationMode};

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.parse_file(&std::fs::read_to_string("/tmp/v6.cfg").unwrap()).unwrap();
    let prep = prepare(&cfg).unwrap();
    let batch: Vec<_> = prep.sources.iter().take(14).cloned().collect();
    let dims = cfg.dims();

    let variants: Vec<(&str, meta::MetaConfig)> = vec![
        ("full", cfg.meta.clone()),
        (
            "no_data",
            {
                let mut m = cfg.meta.clone();
                m.ablation = Ablation::NoData;
                m
            },
        ),
        (
            "identity",
            {
                let mut m = cfg.meta.clone();
                m.modulation = ModulationMode::Identity;
                m
            },
        ),
    ];
    for (name, mcfg) in variants {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut init_rng = ChaCha8Rng::seed_from_u64(3);
        let params = meta::init_meta_params(&dims, &mcfg, &mut init_rng);
        let t = Instant::now();
        for _ in 0..20 {
            meta::meta_batch_grads(&params, &batch, &mcfg, &mut rng).unwrap();
        }
        println!("{name}: {:.1} ms/step", t.elapsed().as_secs_f64() * 1000.0 / 20.0);
    }
}
