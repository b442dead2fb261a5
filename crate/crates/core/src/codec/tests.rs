use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::detector::{Detection, DetectionSet, DetectionSource};
use crate::masking::{build_mask_plan, MaskPlan};
use crate::nncore::LEVELS;
use crate::phy::{ChannelModel, LinkConfig};
use crate::vision::{ImageTensor, PatchGrid};

fn small() -> CodecConfig {
    CodecConfig {
        height: 16,
        width: 16,
        channels: 3,
        patch: 8,
        embed_dim: 16,
        heads: 2,
        blocks: 1,
        mlp_dim: 32,
        compress_hidden: 16,
        cc_hidden: 8,
        cc_layers: 2,
        bcr_den: 16,
        variant: Variant::Vit,
        cnn_widths: vec![8, 8, 8],
    }
}

fn image(cfg: &CodecConfig, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.height * cfg.width * cfg.channels;
    ImageTensor::new(cfg.height, cfg.width, cfg.channels, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn plan(cfg: &CodecConfig, mr: f64) -> MaskPlan {
    let grid = PatchGrid::new(cfg.height, cfg.width, cfg.patch).unwrap();
    let order: Vec<usize> = (0..grid.n_total()).collect();
    build_mask_plan(&order, mr, &DetectionSet::empty_stub(), &grid, cfg.channels).unwrap()
}

fn dataset(cfg: &CodecConfig, n: usize) -> Vec<Sample> {
    let det = DetectionSet::new(
        vec![Detection { class: "obj".into(), conf: 1.0, bbox: [0.0, 0.0, 6.0, 6.0] }],
        DetectionSource::Sidecar,
    );
    (0..n).map(|i| Sample::new(image(cfg, i as u64), det.clone(), cfg.patch).unwrap()).collect()
}

fn quick(stage_seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch: 2,
        lr: 1e-3,
        seed: stage_seed,
        channel: ChannelModel::Awgn,
        snr: SnrSpec::Fixed(10.0),
        ..TrainConfig::default()
    }
}

fn group_hashes(codec: &Codec) -> Vec<(String, String)> {
    groups(codec.cfg.variant).iter().map(|g| (g.to_string(), codec.params.hash(Some(g)))).collect()
}

#[test]
fn symbol_budgets() {
    for cfg in [CodecConfig::full(), cnn_only_variant(&CodecConfig::full())] {
        assert_eq!(cfg.n_symbols(), 9408);
        assert_eq!(cfg.n_levels(), 18816);
        cfg.validate().unwrap();
    }
    for cfg in [CodecConfig::toy(), cnn_only_variant(&CodecConfig::toy())] {
        assert_eq!(cfg.n_symbols(), 32 * 32 * 3 / 16);
        cfg.validate().unwrap();
        let codec = Codec::new(cfg.clone(), 1).unwrap();
        let levels = codec.encode(&image(&cfg, 0), &plan(&cfg, 0.0)).unwrap();
        assert_eq!(levels.len(), 2 * cfg.n_symbols());
        assert!(levels.iter().all(|v| LEVELS.contains(&(*v as f64))));
    }
}

#[test]
fn config_rejects_bad_heads() {
    let mut cfg = small();
    cfg.heads = 3;
    assert!(Codec::new(cfg, 0).is_err());
    let mut cfg = small().with_variant(Variant::CnnOnly);
    cfg.cnn_widths.pop();
    assert!(cfg.validate().is_err());
}

#[test]
fn dequantize_examples() {
    let d = dequantize(&[-3.0, -1.0, 1.0, 3.0]);
    let want = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
    for (a, b) in d.iter().zip(want) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
    assert_eq!(dequantize(&[0.0, 0.0]), vec![0.0, 0.0]);
    assert!((dequantize(&[1.2])[0] - 0.4).abs() < 1e-6);
}

#[test]
fn decode_shape_range_and_zero_latent() {
    for cfg in [small(), small().with_variant(Variant::CnnOnly)] {
        let mut codec = Codec::new(cfg.clone(), 3).unwrap();
        codec.set_cc_active(true);
        let pl = plan(&cfg, 0.5);
        let lv = codec.encode(&image(&cfg, 9), &pl).unwrap();
        for latent in [lv, vec![0.0; cfg.n_levels()]] {
            let out = codec.decode(&latent, &pl).unwrap();
            assert_eq!(out.dims(), (cfg.height, cfg.width, cfg.channels));
            assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
        assert!(codec.decode(&[0.0; 3], &pl).is_err());
    }
}

#[test]
fn encode_is_deterministic() {
    let cfg = small();
    let a = Codec::new(cfg.clone(), 5).unwrap();
    let b = Codec::new(cfg.clone(), 5).unwrap();
    assert_eq!(a.hash(), b.hash());
    let img = image(&cfg, 2);
    let pl = plan(&cfg, 0.25);
    let x: Vec<u32> = a.encode(&img, &pl).unwrap().iter().map(|v| v.to_bits()).collect();
    let y: Vec<u32> = b.encode(&img, &pl).unwrap().iter().map(|v| v.to_bits()).collect();
    assert_eq!(x, y);
}

#[test]
fn wrong_image_shape_rejected() {
    let cfg = small();
    let codec = Codec::new(cfg.clone(), 0).unwrap();
    let img = ImageTensor::filled(8, 8, 3, 0.5);
    assert!(codec.encode(&img, &plan(&cfg, 0.0)).is_err());
}

#[test]
fn gradcheck_through_quantizer_and_channel() {
    let r = end_to_end_gradcheck(11).unwrap();
    assert!(r.checked.len() >= 20);
    assert!(r.checked.iter().any(|(_, _, a, _)| a.abs() > 1e-8));
    assert!(r.max_rel_err < 1e-3, "{:?}", r);
}

#[test]
fn stage2_freeze_contract() {
    let cfg = small();
    let data = dataset(&cfg, 4);
    let mut codec = Codec::new(cfg, 0).unwrap();
    let before = group_hashes(&codec);
    train_stage2(&mut codec, &data, &quick(1)).unwrap();
    assert!(codec.cc_active());
    for ((g, a), (_, b)) in before.iter().zip(group_hashes(&codec)) {
        let cc = g == GROUP_CC_ENC || g == GROUP_CC_DEC;
        assert_eq!(cc, *a != b, "group {g}");
    }
}

#[test]
fn stage1_leaves_cc_untouched() {
    let cfg = small();
    let data = dataset(&cfg, 4);
    let mut codec = Codec::new(cfg, 0).unwrap();
    let before = group_hashes(&codec);
    let recs = train_stage1(&mut codec, &data, &quick(1)).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].channel, "noiseless");
    assert!(!codec.cc_active());
    for ((g, a), (_, b)) in before.iter().zip(group_hashes(&codec)) {
        let cc = g == GROUP_CC_ENC || g == GROUP_CC_DEC;
        assert_eq!(cc, *a == b, "group {g}");
    }
}

#[test]
fn finetune_changes_every_group() {
    let cfg = small();
    let data = dataset(&cfg, 2);
    let mut codec = Codec::new(cfg, 0).unwrap();
    let before = group_hashes(&codec);
    finetune(&mut codec, &data, &quick(2)).unwrap();
    for ((g, a), (_, b)) in before.iter().zip(group_hashes(&codec)) {
        assert_ne!(*a, b, "group {g}");
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let cfg = small();
    let data = dataset(&cfg, 6);
    let mut tc = quick(4);
    tc.epochs = 2;
    tc.snr = SnrSpec::Uniform(-5.0, 15.0);
    tc.channel = ChannelModel::RayleighFlat;
    let run = || {
        let mut c = Codec::new(cfg.clone(), 8).unwrap();
        let r = finetune(&mut c, &data, &tc).unwrap();
        (c.hash(), r)
    };
    let (h1, r1) = run();
    let (h2, r2) = run();
    assert_eq!(h1, h2);
    assert_eq!(r1, r2);

    let dir = tempfile::tempdir().unwrap();
    let mut c = Codec::new(cfg.clone(), 8).unwrap();
    let mut tc1 = tc.clone();
    tc1.epochs = 1;
    tc1.checkpoint_dir = Some(dir.path().to_path_buf());
    finetune(&mut c, &data, &tc1).unwrap();
    let ck = dir.path().join("stage3_epoch000.slnn");
    assert!(ck.exists());
    let resume = || {
        let mut c = Codec::load(cfg.clone(), &ck).unwrap();
        let mut t = tc.clone();
        t.epochs = 1;
        t.start_epoch = 1;
        finetune(&mut c, &data, &t).unwrap();
        c.hash()
    };
    assert_eq!(resume(), resume());
}

#[test]
fn divergence_is_reported_and_params_restored() {
    let cfg = small();
    let mut data = dataset(&cfg, 2);
    data[1].image.data_mut()[0] = f32::NAN;
    let mut codec = Codec::new(cfg, 0).unwrap();
    // Stage 3 switches the channel-coding CNNs on before the first step.
    codec.set_cc_active(true);
    let h = codec.hash();
    let mut tc = quick(0);
    tc.mask_prob = 0.0;
    tc.batch = 1;
    let dir = tempfile::tempdir().unwrap();
    tc.checkpoint_dir = Some(dir.path().to_path_buf());
    match finetune(&mut codec, &data, &tc) {
        Err(CodecError::Diverged { stage: 3, epoch: 0, checkpoint: Some(p) }) => assert!(p.exists()),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(codec.hash(), h);
}

#[test]
fn training_log_format() {
    let cfg = small();
    let data = dataset(&cfg, 2);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("train.csv");
    let mut tc = quick(0);
    tc.log_path = Some(log.clone());
    let mut codec = Codec::new(cfg, 0).unwrap();
    train_stage1(&mut codec, &data, &tc).unwrap();
    train_stage2(&mut codec, &data, &tc).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# semlink-csv v1");
    assert_eq!(lines[1], TRAIN_LOG_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("0,1,noiseless,inf,"));
    assert!(lines[3].starts_with("0,2,awgn,10,"));
}

#[test]
fn eval_loss_is_finite_and_seeded() {
    let cfg = small();
    let data = dataset(&cfg, 3);
    let codec = Codec::new(cfg, 0).unwrap();
    let link = LinkConfig::default();
    let a = eval_loss(&codec, &data, ChannelModel::Awgn, 5.0, None, 1, &link).unwrap();
    let b = eval_loss(&codec, &data, ChannelModel::Awgn, 5.0, None, 1, &link).unwrap();
    assert!(a.is_finite() && a > 0.0);
    assert_eq!(a, b);
    assert!(eval_loss(&codec, &[], ChannelModel::Awgn, 5.0, None, 1, &link).is_err());
}

#[test]
fn channel_draw_reconstructs_link_output() {
    let link = LinkConfig::default().with_channel(ChannelModel::RayleighMultipath { taps: 4 }, 5.0).with_seed(3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let levels: Vec<f32> = (0..384).map(|_| LEVELS[rng.random_range(0..4)] as f32).collect();
    let d = ChannelDraw::from_link(&levels, &link).unwrap().unwrap();
    let out = crate::phy::transmit_link(&levels, &link).unwrap();
    for (i, pair) in levels.chunks(2).enumerate() {
        let (gr, gi) = d.gains[i];
        let re = gr * pair[0] - gi * pair[1] + d.residual[2 * i];
        let im = gi * pair[0] + gr * pair[1] + d.residual[2 * i + 1];
        assert!((re - out.levels[2 * i]).abs() < 1e-4);
        assert!((im - out.levels[2 * i + 1]).abs() < 1e-4);
    }
    let noiseless = LinkConfig::default().with_channel(ChannelModel::Noiseless, 0.0);
    assert!(ChannelDraw::from_link(&levels, &noiseless).unwrap().is_none());
}

#[test]
fn snr_spec_parsing() {
    assert_eq!("10".parse::<SnrSpec>().unwrap(), SnrSpec::Fixed(10.0));
    assert_eq!("-5..15".parse::<SnrSpec>().unwrap(), SnrSpec::Uniform(-5.0, 15.0));
    assert_eq!("-5".parse::<SnrSpec>().unwrap(), SnrSpec::Fixed(-5.0));
    assert!("15..-5".parse::<SnrSpec>().is_err());
    assert!("x".parse::<SnrSpec>().is_err());
    let s = SnrSpec::Uniform(-5.0, 15.0);
    assert_eq!(s.to_string().parse::<SnrSpec>().unwrap(), s);
}

#[test]
fn sample_order_puts_objects_first() {
    let cfg = small();
    let s = &dataset(&cfg, 1)[0];
    assert_eq!(s.order[0], 0);
    let mut sorted = s.order.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2, 3]);
}
