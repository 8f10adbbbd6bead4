use vitscale::optim::OptimizerMode;
use vitscale::par::Exec;
use vitscale::probe::{kshot_sample, Probe, ProbeOptions};
use vitscale::train::*;
use vitscale::vit::{load_checkpoint, save_checkpoint, HeadType, ShapeConfig};

fn quick(head: HeadType, mode: OptimizerMode, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::micro(ShapeConfig::micro(head), mode, steps);
    cfg.schedule.warmup_steps = 5;
    cfg
}

#[test]
fn training_is_bit_reproducible() {
    let data = gen_synthetic(&SyntheticSpec::micro(0.05, 16, 0)).unwrap();
    let cfg = quick(HeadType::Map, OptimizerMode::AdamHp, 20);
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log.to_csv(), b.log.to_csv());

    let c = train(&TrainConfig { seed: 1, ..cfg }, &data).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn loss_falls_on_the_synthetic_task() {
    let data = gen_synthetic(&SyntheticSpec::micro(0.05, 16, 0)).unwrap();
    let out = train(&quick(HeadType::Gap, OptimizerMode::AdafactorMod, 40), &data).unwrap();
    let first = out.log.rows.first().unwrap().loss;
    assert!((first - 4f64.ln()).abs() < 1e-9);
    assert!(out.log.final_loss().unwrap() < 0.5 * first);
}

#[test]
fn inference_agrees_across_executors() {
    let data = gen_synthetic(&SyntheticSpec::micro(0.1, 40, 2)).unwrap();
    let cfg = quick(HeadType::Cls, OptimizerMode::Adam, 10);
    let out = train(&cfg, &data).unwrap();
    let seq = extract_features(&out.params, &cfg.model, &data, Exec::Sequential).unwrap();
    let par = extract_features(&out.params, &cfg.model, &data, Exec::Parallel).unwrap();
    assert_eq!(seq, par);
    assert_eq!(
        predict(&out.params, &cfg.model, &data, Exec::Sequential).unwrap(),
        predict(&out.params, &cfg.model, &data, Exec::Parallel).unwrap()
    );
}

#[test]
fn polyak_average_is_reported() {
    let data = gen_synthetic(&SyntheticSpec::micro(0.05, 8, 0)).unwrap();
    let mut cfg = quick(HeadType::Gap, OptimizerMode::Adam, 10);
    cfg.polyak_decay = Some(0.9);
    let out = train(&cfg, &data).unwrap();
    let avg = out.averaged.expect("averaged params");
    assert_ne!(avg, out.params);
}

#[test]
fn checkpoint_features_probe_pipeline() {
    let data = gen_synthetic(&SyntheticSpec::micro(0.05, 32, 0)).unwrap();
    let cfg = quick(HeadType::Gap, OptimizerMode::AdafactorMod, 60);
    let out = train(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.vtsk");
    save_checkpoint(&ckpt, &cfg.model, &out.params).unwrap();
    let (shape, params) = load_checkpoint(&ckpt).unwrap();

    let held = gen_synthetic(&SyntheticSpec::micro(0.05, 32, 1)).unwrap();
    let feats = extract_features(&params, &shape, &held, Exec::Parallel).unwrap();
    let train_set = kshot_sample(&feats, 5, 0).unwrap();
    let probe = Probe::fit(&train_set, &ProbeOptions::default()).unwrap();
    assert!(probe.accuracy(&feats).unwrap() > 0.9);
}

fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend(d.to_be_bytes());
    }
    b.extend_from_slice(body);
    b
}

#[test]
fn idx_files_load_as_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..2 * 4 * 4).map(|i| (i * 8) as u8).collect();
    std::fs::write(dir.path().join("x.idx"), idx_bytes(0x803, &[2, 4, 4], &pixels)).unwrap();
    std::fs::write(dir.path().join("y.idx"), idx_bytes(0x801, &[2], &[0, 2])).unwrap();
    let d = load_idx(dir.path().join("x.idx"), dir.path().join("y.idx")).unwrap();
    assert_eq!((d.len(), d.res(), d.channels(), d.classes), (2, 4, 1, 3));
    assert_eq!(d.image(1)[0], 128.0 / 255.0);

    std::fs::write(dir.path().join("bad.idx"), idx_bytes(0x801, &[2, 4, 4], &pixels)).unwrap();
    assert!(load_idx(dir.path().join("bad.idx"), dir.path().join("y.idx")).is_err());
}

#[test]
fn config_rejects_mismatched_data() {
    let data = gen_synthetic(&SyntheticSpec { res: 8, ..SyntheticSpec::micro(0.05, 4, 0) }).unwrap();
    assert!(train(&quick(HeadType::Gap, OptimizerMode::Adam, 2), &data).is_err());
}
