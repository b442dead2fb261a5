use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{decode_graph, encode_graph, ForwardMode, SQUASH};
use super::{Codec, CodecConfig, CodecError, Variant};
use crate::detector::DetectionSet;
use crate::masking::{build_mask_plan, MaskPlan};
use crate::nncore::{Grads, Graph, ParamId, ParamStore, QuantMode, Tensor};
use crate::vision::PatchGrid;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// (parameter name, flat index, analytic, numeric)
    pub checked: Vec<(String, usize, f64, f64)>,
}

fn micro_config() -> CodecConfig {
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

struct Fixture {
    cfg: CodecConfig,
    image: Vec<f64>,
    plan: MaskPlan,
    residual: Vec<f64>,
}

fn loss(store: &ParamStore<f64>, fx: &Fixture) -> Result<(f64, Grads<f64>), CodecError> {
    let cfg = &fx.cfg;
    let shape = vec![cfg.height, cfg.width, cfg.channels];
    let mut g = Graph::new(store);
    let img = g.input(Tensor::new(shape.clone(), fx.image.clone())?);
    let lv = encode_graph(&mut g, cfg, img, &fx.plan, ForwardMode { use_cc: true, quant: QuantMode::Surrogate })?;
    let gains = vec![(1.0, 0.0); fx.residual.len() / 2];
    let a = g.complex_gain(lv, gains)?;
    let r = g.input(Tensor::new(g.shape(lv).to_vec(), fx.residual.clone())?);
    let rx = g.add(a, r)?;
    let latent = g.scale(rx, 1.0 / SQUASH)?;
    let out = decode_graph(&mut g, cfg, latent, &fx.plan, true)?;
    let target = g.input(Tensor::new(shape, fx.image.clone())?);
    let mask: Vec<f64> = fx.plan.mask_matrix().iter().map(|&v| v as f64).collect();
    let l = g.masked_mse_loss(out, target, &mask, fx.plan.n_total, fx.plan.n_unmasked)?;
    let grads = g.backward(l)?.params;
    Ok((g.scalar(l), grads))
}

/// Central-difference check of the masked loss with respect to sampled encoder
/// parameters, through the quantizer surrogate and a fixed AWGN realization.
pub fn end_to_end_gradcheck(seed: u64) -> Result<GradcheckReport, CodecError> {
    let cfg = micro_config();
    let codec = Codec::new(cfg.clone(), seed)?;
    let mut store: ParamStore<f64> = codec.params.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let grid = PatchGrid::new(cfg.height, cfg.width, cfg.patch)?;
    let plan = build_mask_plan(&[0, 1, 2, 3], 0.25, &DetectionSet::empty_stub(), &grid, cfg.channels)?;
    let n = cfg.height * cfg.width * cfg.channels;
    let image: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
    let mask: Vec<f32> = plan.mask_matrix();
    let image = image.iter().zip(&mask).map(|(v, &m)| v * m as f64).collect();
    let residual = (0..cfg.n_levels()).map(|_| 0.3 * rng.random_range(-1.0..1.0)).collect();
    let fx = Fixture { cfg, image, plan, residual };

    let (_, grads) = loss(&store, &fx)?;
    let enc: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with("enc.")).collect();
    let h = 1e-6;
    let mut report = GradcheckReport { max_rel_err: 0.0, checked: Vec::new() };
    for k in 0..21 {
        let id = enc[k % enc.len()];
        let len = store.get(id).len();
        let i = rng.random_range(0..len);
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + h;
        let (lp, _) = loss(&store, &fx)?;
        store.get_mut(id).data_mut()[i] = orig - h;
        let (lm, _) = loss(&store, &fx)?;
        store.get_mut(id).data_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g[i]);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked.push((store.name(id).to_string(), i, analytic, numeric));
    }
    Ok(report)
}
