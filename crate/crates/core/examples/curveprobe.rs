use kvedit::flow::{denoise_loop, invert_loop, token_mse, GuidedField, ScheduleKind, TimeGrid};
use kvedit::model::{tokenize, ConditionId, ModelConfig, ModelWeights};
use kvedit::train::{gen_dataset, train, TrainConfig};

fn curve(w: &ModelWeights, img: &kvedit::numerics::Tensor, c: ConditionId, grid: &TimeGrid, g: f64) -> Vec<f64> {
    let start = tokenize(img, w).unwrap();
    let mut field = GuidedField { weights: w, condition: c, guidance: g };
    let traj = invert_loop(start, grid, &mut field, true).unwrap();
    let mut out = Vec::new();
    for (depth, st) in traj.iter().enumerate() {
        let mut f2 = GuidedField { weights: w, condition: c, guidance: g };
        let back = denoise_loop(st.clone(), grid, &mut f2, depth).unwrap();
        out.push(token_mse(&back.tokens, &traj[0].tokens).unwrap());
    }
    out
}

fn report(tag: &str, w: &ModelWeights, img: &kvedit::numerics::Tensor, c: ConditionId, grid: &TimeGrid) {
    let cv = curve(w, img, c, grid, 1.0);
    let n = grid.steps();
    let q = n.div_ceil(4);
    println!("{tag}: N={n} mse({q})={:.4e} mse({n})={:.4e} ratio={:.2}", cv[q], cv[n], cv[n]/cv[q]);
}

fn main() {
    let img = kvedit::numerics::Tensor::load_tnsr(std::path::Path::new("/tmp/kvx/data/sample_0001.tnsr")).unwrap();
    let w = ModelWeights::load(std::path::Path::new("/tmp/kvx/model_full/model.ckpt")).unwrap();
    let grid_noskip = TimeGrid::new(28, 0, ScheduleKind::Uniform).unwrap();
    report("512-data model, no-skip", &w, &img, ConditionId(3), &grid_noskip);

    let model_cfg = ModelConfig::default();
    let tcfg = TrainConfig::default();
    for dsize in [64usize, 128] {
        let data = gen_dataset(0, dsize, &model_cfg).unwrap();
        let (w2, losses) = train(&model_cfg, &tcfg, &data).unwrap();
        let head: f64 = losses[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = losses[1900..].iter().sum::<f64>() / 100.0;
        println!("dataset {dsize}: loss {head:.3} -> {tail:.3}");
        let grid_skip = TimeGrid::new(28, 4, ScheduleKind::Uniform).unwrap();
        report(&format!("{dsize}-data model, skip4"), &w2, &data[1].image, data[1].condition, &grid_skip);
        report(&format!("{dsize}-data model, no-skip"), &w2, &data[1].image, data[1].condition, &grid_noskip);
    }
}
