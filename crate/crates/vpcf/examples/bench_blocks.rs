// finer timing of decoder sub-blocks at toy scale
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use vpcf::config::RunConfig;
use vpcf::model::{
    cross_attention_forward, self_attention_forward, CrossAttnWeights, PoolGrid, SelfAttnWeights,
};
use vpcf::params::ParamVec;

fn main() {
    let cfg = RunConfig::default().model_config();
    let params = ParamVec::seeded_init(cfg.layout(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = cfg.cells();
    let c = cfg.channels;
    let x: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let prev: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grid = PoolGrid::new([64, 64], cfg.self_attn_stride);
    let aligned: Vec<([f64; 2], bool)> = (0..64)
        .flat_map(|a| (0..64).map(move |b| ([a as f64 + 0.3, b as f64 - 0.2], true)))
        .collect();
    let sw = SelfAttnWeights {
        wq: params.tensor("layers.0.self.wq"),
        wk: params.tensor("layers.0.self.wk"),
        wv: params.tensor("layers.0.self.wv"),
        wo: params.tensor("layers.0.self.wo"),
        bq: params.tensor("layers.0.self.bq"),
        bk: params.tensor("layers.0.self.bk"),
        bv: params.tensor("layers.0.self.bv"),
        bo: params.tensor("layers.0.self.bo"),
    };
    let cw = CrossAttnWeights {
        off_w: params.tensor("layers.0.cross.off_w"),
        off_b: params.tensor("layers.0.cross.off_b"),
        wt_w: params.tensor("layers.0.cross.wt_w"),
        wt_b: params.tensor("layers.0.cross.wt_b"),
        out_w: params.tensor("layers.0.cross.out_w"),
        out_b: params.tensor("layers.0.cross.out_b"),
    };
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = self_attention_forward(&x, c, &grid, &sw);
    }
    println!("self fwd: {:?}/rep", t0.elapsed() / reps);
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = cross_attention_forward(&x, &prev, [64, 64], c, cfg.attn_points, &aligned, &cw);
    }
    println!("cross fwd: {:?}/rep", t0.elapsed() / reps);
}
