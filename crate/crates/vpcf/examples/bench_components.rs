// quick component timing at toy scale
use std::time::Instant;
use vpcf::config::RunConfig;
use vpcf::latent::{latent_render_with_tables, latent_render_backward, RayTables};
use vpcf::model::*;
use vpcf::params::ParamVec;
use vpcf::scenes::*;
use vpcf::train::*;

fn main() {
    let cfg = RunConfig::default();
    let model_cfg = cfg.model_config();
    let scene_cfg = cfg.scene_config();
    let camera = cfg.camera_rig();
    let lidar = cfg.lidar_rig();
    let ep = EpisodeData::materialize(generate_episode(1, &scene_cfg).unwrap(), &camera, &lidar).unwrap();
    let episodes = vec![ep];
    let samples = build_samples(&episodes, 5, 6).unwrap();
    let params = ParamVec::seeded_init(model_cfg.layout(), 1);
    let tables = RayTables::build([64,64], model_cfg.latent_config());
    let ws = DecoderWorkspace::new(&model_cfg);

    let t0 = Instant::now();
    let (f_bev, enc_cache) = encode_history_forward(&samples[0].seq, &params, &model_cfg.bev).unwrap();
    println!("encode fwd: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let (f0, lat_cache) = latent_render_with_tables(&f_bev, params.tensor("latent.proj_w"), params.tensor("latent.proj_b"), &tables).unwrap();
    println!("latent fwd: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let (next, step_cache) = decode_future_step_forward(&f0, &samples[0].motions[0], &params, &model_cfg, &ws);
    println!("decode fwd (1 step): {:?}", t0.elapsed());

    let vol = project_occupancy(&next, &params, model_cfg.volume);
    let t0 = Instant::now();
    let (_, g_logits) = ray_ce_loss_with_grad(&vol, &samples[0].futures[0], samples[0].origin, &cfg.loss_config()).unwrap();
    println!("ray_ce fwd+grad: {:?}", t0.elapsed());

    let mut grads = params.zeros_like();
    let mut g_state = vec![0.0; next.data.len()];
    project_occupancy_backward(&next, &params, &g_logits, &mut g_state, &mut grads);
    let t0 = Instant::now();
    let mut g_prev = vec![0.0; f0.data.len()];
    decode_future_step_backward(&f0, &params, &model_cfg, &ws, &step_cache, &g_state, &mut g_prev, &mut grads);
    println!("decode bwd (1 step): {:?}", t0.elapsed());

    let t0 = Instant::now();
    let lg = latent_render_backward(&f_bev, params.tensor("latent.proj_w"), &tables, &lat_cache, &g_prev);
    println!("latent bwd: {:?}", t0.elapsed());

    let t0 = Instant::now();
    encode_history_backward(&samples[0].seq, &params, &enc_cache, &lg.map, &mut grads);
    println!("encode bwd: {:?}", t0.elapsed());
}
