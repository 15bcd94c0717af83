//! Training objectives: masked/unmasked noise MSE, the gated identity
//! (embedding-cosine) loss, the attention localization loss with truncation
//! ceilings, and their sum.
//!
//! Every loss is built as tape nodes so one backward pass covers the total;
//! the reported numbers come from the same nodes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conditioning::{FaceEmbedder, MAX_TOKENS};
use crate::denoiser::AttnMap;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Attention floor demanded of the identity token inside the face mask.
    pub beta: f64,
    /// Attention floor demanded of the emotion token inside the face mask.
    pub gamma: f64,
    /// Weight of the identity-token localization row.
    pub lambda_id_loc: f64,
    /// Weight of the emotion-token localization row.
    pub mu_expr_loc: f64,
    /// Identity loss is active only for timesteps t <= r_t.
    pub r_t: usize,
    /// Probability that a sample's noise loss is restricted to the face region.
    pub face_region_loss_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.8,
            gamma: 0.1,
            lambda_id_loc: 0.001,
            mu_expr_loc: 0.01,
            r_t: 250,
            face_region_loss_fraction: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("attention ceilings must lie in [0,1]"));
        }
        if self.lambda_id_loc < 0.0 || self.mu_expr_loc < 0.0 {
            return Err(Error::config("localization weights must be non-negative"));
        }
        if self.r_t < 1 || self.r_t > t_max {
            return Err(Error::config(format!(
                "identity gate timestep {} outside [1, {t_max}]",
                self.r_t
            )));
        }
        if !(0.0..=1.0).contains(&self.face_region_loss_fraction) {
            return Err(Error::config("face-region loss fraction must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Latent codec. At this scale the latent space IS pixel space, so encode
/// and decode are exact identities; the seam is kept so the losses and the
/// sampler go through a decode step like they would with a real autoencoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl IdentityCodec {
    pub fn encode(&self, x: &Tensor) -> Tensor {
        x.clone()
    }

    pub fn decode(&self, z: &Tensor) -> Tensor {
        z.clone()
    }

    pub fn decode_var<'t>(&self, z: Var<'t>) -> Var<'t> {
        z
    }
}

/// Full-resolution face mask plus deterministic per-resolution resampling.
#[derive(Debug, Clone)]
pub struct FaceMask {
    full: Tensor,
}

impl FaceMask {
    pub fn new(mask: Tensor) -> Result<Self> {
        if mask.shape().len() != 2 {
            return Err(Error::Shape {
                context: "face mask",
                expected: vec![0, 0],
                got: mask.shape().to_vec(),
            });
        }
        if mask.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("face mask values must lie in [0,1]"));
        }
        Ok(FaceMask { full: mask })
    }

    pub fn full(&self) -> &Tensor {
        &self.full
    }

    pub fn at_resolution(&self, h: usize, w: usize) -> Result<Tensor> {
        resample_mask(&self.full, h, w)
    }
}

/// Area-average resampling of a [H,W] mask down to [th,tw]. Each output cell
/// averages the input over the exact rectangle it covers (fractional overlap
/// for non-divisor sizes), so equal resolution is the identity and total
/// mass scales by the area ratio.
pub fn resample_mask(mask: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if th == 0 || tw == 0 {
        return Err(Error::invalid("target resolution must be positive"));
    }
    if th > h || tw > w {
        return Err(Error::invalid(format!(
            "mask upsampling {h}x{w} -> {th}x{tw} is not supported"
        )));
    }
    if th == h && tw == w {
        return Ok(mask.clone());
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = Tensor::zeros(&[th, tw]);
    for oy in 0..th {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        for ox in 0..tw {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let mut acc = 0.0;
            for iy in y0.floor() as usize..(y1.ceil() as usize).min(h) {
                let wy = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                if wy == 0.0 {
                    continue;
                }
                for ix in x0.floor() as usize..(x1.ceil() as usize).min(w) {
                    let wx = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                    acc += mask.at2(iy, ix) * wy * wx;
                }
            }
            out.set2(oy, ox, acc / (sy * sx));
        }
    }
    Ok(out)
}

/// Per-sample loss record for the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub noise: f64,
    pub identity: f64,
    pub localization: f64,
    pub total: f64,
    pub gated: bool,
}

/// Mean squared noise-prediction error. With a region mask, the squared
/// error is averaged only over the spatial positions whose mask value is at
/// least 0.5 (all channels of those positions).
pub fn noise_loss<'t>(
    tape: &'t Tape,
    eps_pred: Var<'t>,
    eps_true: &Tensor,
    region_mask: Option<&Tensor>,
) -> Result<Var<'t>> {
    let shape = eps_pred.shape();
    if shape != eps_true.shape() {
        return Err(Error::Shape {
            context: "noise loss",
            expected: shape,
            got: eps_true.shape().to_vec(),
        });
    }
    if shape.len() != 3 {
        return Err(Error::invalid("noise loss expects [C,H,W] maps"));
    }
    let diff = eps_pred.sub(tape.leaf(eps_true.clone()));
    let sq = diff.mul(diff);
    match region_mask {
        None => Ok(sq.mean()),
        Some(mask) => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            if mask.shape() != [h, w] {
                return Err(Error::Shape {
                    context: "noise loss mask",
                    expected: vec![h, w],
                    got: mask.shape().to_vec(),
                });
            }
            let mut selected = Tensor::zeros(&[c, h, w]);
            let mut count = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if mask.at2(y, x) >= 0.5 {
                        count += 1;
                        for ch in 0..c {
                            selected.set3(ch, y, x, 1.0);
                        }
                    }
                }
            }
            if count == 0 {
                return Err(Error::invalid(
                    "face-region noise loss with an empty region",
                ));
            }
            Ok(sq.mul_const(&selected).sum().scale(1.0 / (c * count) as f64))
        }
    }
}

/// 1 - cosine(v, reference), built on the tape. The reference is a constant.
/// Rejects (never clamps) degenerate norms below 1e-12.
pub(crate) fn cosine_distance_var<'t>(
    tape: &'t Tape,
    v: Var<'t>,
    reference: &Tensor,
) -> Result<Var<'t>> {
    let ref_norm = reference.norm();
    if ref_norm < 1e-12 {
        return Err(Error::DegenerateNorm(
            "reference embedding has zero norm".into(),
        ));
    }
    let v_norm_now = v.value().norm();
    if v_norm_now < 1e-12 {
        return Err(Error::DegenerateNorm(
            "generated embedding has zero norm".into(),
        ));
    }
    let unit_ref = reference.scale(1.0 / ref_norm);
    let dot = v.mul_const(&unit_ref).sum();
    let norm = v.mul(v).sum().sqrt();
    let cos = dot.mul_scalar_var(tape.scalar(1.0).div(norm));
    Ok(cos.scale(-1.0).add_scalar(1.0))
}

/// Identity-preservation loss at timestep `t`. For t beyond the gate the
/// loss contributes exactly zero with zero gradient: no nodes are added and
/// `None` is returned. Otherwise the one-step denoised estimate is decoded,
/// cropped to the face box, embedded, and compared to the reference face.
#[allow(clippy::too_many_arguments)]
pub fn identity_loss<'t>(
    tape: &'t Tape,
    z_t: &Tensor,
    eps_pred: Var<'t>,
    t: usize,
    sched: &NoiseSchedule,
    codec: &IdentityCodec,
    bbox: [usize; 4],
    reference_face: &Tensor,
    embedder: &FaceEmbedder,
    weights: &LossWeights,
) -> Result<Option<Var<'t>>> {
    if t < 1 || t > sched.t_max() {
        return Err(Error::invalid(format!(
            "timestep {t} outside [1, {}]",
            sched.t_max()
        )));
    }
    if t > weights.r_t {
        return Ok(None);
    }
    let shape = eps_pred.shape();
    if shape != z_t.shape() {
        return Err(Error::Shape {
            context: "identity loss",
            expected: z_t.shape().to_vec(),
            got: shape,
        });
    }
    let [x0, y0, x1, y1] = bbox;
    if !(x0 < x1 && y0 < y1 && y1 <= shape[1] && x1 <= shape[2]) {
        return Err(Error::invalid(format!("bbox {bbox:?} invalid for {shape:?}")));
    }

    let (c0, c1) = sched.reverse_coeffs(t)?;
    let z_hat = eps_pred.scale(c1).add(tape.leaf(z_t.clone()).scale(c0));
    let x_hat = codec.decode_var(z_hat);
    let face = x_hat.crop_spatial(y0, x0, y1 - y0, x1 - x0);
    // Reject degenerate crops (no face-like pixels) instead of comparing
    // meaningless embeddings; the plain embedder carries that check.
    embedder.embed(&face.value())?;
    let e_gen = embedder.embed_var(tape, face);
    let e_ref = embedder.embed(reference_face)?;
    Ok(Some(cosine_distance_var(tape, e_gen, &e_ref)?))
}

/// Attention localization loss over the recorded maps.
///
/// Per layer, the identity-token column is pushed to zero outside the face
/// mask and up to at least `beta` inside it; the emotion column (when the
/// caption has one) gets the same treatment with ceiling `gamma`. Both means
/// run over all spatial positions; layer terms are averaged.
pub fn localization_loss<'t>(
    tape: &'t Tape,
    attn: &[AttnMap<'t>],
    mask: &FaceMask,
    identity_index: usize,
    emotion_index: Option<usize>,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    if attn.is_empty() {
        return Err(Error::invalid("localization loss needs attention maps"));
    }
    if identity_index >= MAX_TOKENS {
        return Err(Error::invalid("identity token index out of range"));
    }
    if let Some(j) = emotion_index {
        if j >= MAX_TOKENS {
            return Err(Error::invalid("emotion token index out of range"));
        }
    }

    let n = attn.len() as f64;
    let mut total: Option<Var<'t>> = None;
    for layer in attn {
        let p = layer.h * layer.w;
        if layer.map.shape() != vec![p, MAX_TOKENS] {
            return Err(Error::Shape {
                context: "attention map",
                expected: vec![p, MAX_TOKENS],
                got: layer.map.shape(),
            });
        }
        let m = mask.at_resolution(layer.h, layer.w)?;
        let m_flat = m.clone().reshaped(vec![p])?;
        let ones_minus = m_flat.map(|v| 1.0 - v);

        let token_term = |col: usize, ceiling: f64, weight: f64| -> Var<'t> {
            let a = layer.map.select_col(col); // [P]
            let outside = a.mul_const(&ones_minus).mean();
            let inside = a
                .scale(-1.0)
                .add_scalar(ceiling)
                .relu()
                .mul_const(&m_flat)
                .mean();
            outside.add(inside).scale(weight)
        };

        let mut layer_term = token_term(identity_index, weights.beta, weights.lambda_id_loc);
        if let Some(j) = emotion_index {
            layer_term = layer_term.add(token_term(j, weights.gamma, weights.mu_expr_loc));
        }
        total = Some(match total {
            None => layer_term,
            Some(acc) => acc.add(layer_term),
        });
    }
    let _ = tape;
    Ok(total.expect("nonempty").scale(1.0 / n))
}

/// Combine the per-term tape nodes into the total and its plain report.
/// Absent terms (gated identity, non-full branches) contribute exactly zero
/// with no graph nodes.
pub fn total_loss<'t>(
    noise: Var<'t>,
    identity: Option<Var<'t>>,
    localization: Option<Var<'t>>,
    gated: bool,
) -> (Var<'t>, LossReport) {
    let mut total = noise;
    if let Some(id) = identity {
        total = total.add(id);
    }
    if let Some(loc) = localization {
        total = total.add(loc);
    }
    let report = LossReport {
        noise: noise.value().item(),
        identity: identity.map_or(0.0, |v| v.value().item()),
        localization: localization.map_or(0.0, |v| v.value().item()),
        total: total.value().item(),
        gated,
    };
    (total, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, stream, substream};
    use crate::toyfaces::{crop, render_face, EmotionTable, FaceSpec, IdentityParams};

    fn leaf_map<'t>(tape: &'t Tape, h: usize, w: usize, data: Tensor) -> AttnMap<'t> {
        AttnMap {
            stage: "down0",
            map: tape.leaf(data),
            h,
            w,
        }
    }

    fn weights() -> LossWeights {
        LossWeights::default()
    }

    // ---- weights + codec ----

    #[test]
    fn weights_validation() {
        assert!(weights().validate(1000).is_ok());
        let mut w = weights();
        w.beta = 1.2;
        assert!(w.validate(1000).is_err());
        let mut w = weights();
        w.lambda_id_loc = -0.1;
        assert!(w.validate(1000).is_err());
        let mut w = weights();
        w.r_t = 0;
        assert!(w.validate(1000).is_err());
        let w = weights();
        assert!(w.validate(100).is_err()); // r_t = 250 > T = 100
    }

    #[test]
    fn codec_roundtrip_is_exact() {
        let mut rng = substream(1, stream::DATA, 0, 0);
        let x = normal_tensor(&mut rng, &[3, 8, 8]);
        let codec = IdentityCodec;
        assert_eq!(codec.decode(&codec.encode(&x)), x);
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        assert_eq!(tape.value(codec.decode_var(v)), x);
    }

    // ---- noise loss ----

    #[test]
    fn noise_loss_oracles() {
        let tape = Tape::new();
        // equal -> exactly 0
        let mut rng = substream(2, stream::NOISE, 0, 0);
        let e = normal_tensor(&mut rng, &[3, 4, 4]);
        let l = noise_loss(&tape, tape.leaf(e.clone()), &e, None).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        // single scalar cell: 0.5 vs 0.0 -> 0.25
        let p = Tensor::full(&[1, 1, 1], 0.5);
        let t0 = Tensor::zeros(&[1, 1, 1]);
        let l = noise_loss(&tape, tape.leaf(p), &t0, None).unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-15);

        // 2x2, errors (1,0,0,0): masked on first position -> 1.0, unmasked -> 0.25
        let pred = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let truth = Tensor::zeros(&[1, 2, 2]);
        let mask = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let lm = noise_loss(&tape, tape.leaf(pred.clone()), &truth, Some(&mask)).unwrap();
        assert!((tape.value(lm).item() - 1.0).abs() < 1e-15);
        let lu = noise_loss(&tape, tape.leaf(pred), &truth, None).unwrap();
        assert!((tape.value(lu).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn noise_loss_matches_direct_summation() {
        let mut rng = substream(3, stream::NOISE, 1, 0);
        for case in 0..20 {
            let pred = normal_tensor(&mut rng, &[3, 6, 6]);
            let truth = normal_tensor(&mut rng, &[3, 6, 6]);
            let mask = normal_tensor(&mut rng, &[6, 6]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let n_sel: usize = mask.data().iter().filter(|&&v| v >= 0.5).count();
            if n_sel == 0 {
                continue;
            }

            // independent summation oracle
            let mut sum_all = 0.0;
            let mut sum_sel = 0.0;
            for c in 0..3 {
                for y in 0..6 {
                    for x in 0..6 {
                        let d = pred.at3(c, y, x) - truth.at3(c, y, x);
                        sum_all += d * d;
                        if mask.at2(y, x) >= 0.5 {
                            sum_sel += d * d;
                        }
                    }
                }
            }

            let tape = Tape::new();
            let lu = noise_loss(&tape, tape.leaf(pred.clone()), &truth, None).unwrap();
            let lm = noise_loss(&tape, tape.leaf(pred.clone()), &truth, Some(&mask)).unwrap();
            assert!((tape.value(lu).item() - sum_all / 108.0).abs() < 1e-12, "case {case}");
            assert!(
                (tape.value(lm).item() - sum_sel / (3 * n_sel) as f64).abs() < 1e-12,
                "case {case}"
            );
        }
    }

    #[test]
    fn noise_loss_rejects_empty_region() {
        let tape = Tape::new();
        let pred = Tensor::zeros(&[3, 4, 4]);
        let truth = Tensor::zeros(&[3, 4, 4]);
        let mask = Tensor::full(&[4, 4], 0.49);
        assert!(noise_loss(&tape, tape.leaf(pred), &truth, Some(&mask)).is_err());
    }

    #[test]
    fn noise_loss_gradient_matches_finite_differences() {
        let mut rng = substream(4, stream::NOISE, 2, 0);
        let pred = normal_tensor(&mut rng, &[1, 2, 2]);
        let truth = normal_tensor(&mut rng, &[1, 2, 2]);
        let mask = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();

        for use_mask in [false, true] {
            let loss_of = |p: &Tensor| -> f64 {
                let tape = Tape::new();
                let l = noise_loss(
                    &tape,
                    tape.leaf(p.clone()),
                    &truth,
                    if use_mask { Some(&mask) } else { None },
                )
                .unwrap();
                tape.value(l).item()
            };
            let analytic = {
                let tape = Tape::new();
                let v = tape.leaf(pred.clone());
                let l = noise_loss(&tape, v, &truth, if use_mask { Some(&mask) } else { None })
                    .unwrap();
                tape.backward(l).wrt(v)
            };
            let h = 1e-5;
            for i in 0..4 {
                let mut pp = pred.clone();
                pp.data_mut()[i] += h;
                let mut pm = pred.clone();
                pm.data_mut()[i] -= h;
                let fd = (loss_of(&pp) - loss_of(&pm)) / (2.0 * h);
                let an = analytic.data()[i];
                assert!(
                    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-4,
                    "mask={use_mask} i={i}: {an} vs {fd}"
                );
            }
        }
    }

    // ---- identity loss ----

    fn face_fixture() -> (Tensor, [usize; 4], Tensor) {
        let em = EmotionTable::default_table();
        let spec = FaceSpec {
            identity: IdentityParams { hue: 0.12, ecc: 0.4, eyespan: 0.7 },
            expression: "happy".into(),
            gender: "man".into(),
            background_id: 2,
        };
        let out = render_face(&spec, 77, 32, &em).unwrap();
        let reference = {
            let spec2 = FaceSpec { expression: "sad".into(), ..spec };
            let o2 = render_face(&spec2, 78, 32, &em).unwrap();
            crop(&o2.image, o2.bbox)
        };
        (out.image, out.bbox, reference)
    }

    #[test]
    fn identity_gate_is_exact() {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let (x0, bbox, reference) = face_fixture();
        let w = weights(); // r_t = 250
        let mut rng = substream(5, stream::NOISE, 0, 0);
        let eps = normal_tensor(&mut rng, &[3, 32, 32]);

        for (t, expect_active) in [(251usize, false), (1000, false), (250, true), (1, true)] {
            let z_t = sched.forward_noise(&x0, t, &eps).unwrap();
            let tape = Tape::new();
            let before = tape.len();
            let got = identity_loss(
                &tape,
                &z_t,
                tape.leaf(eps.clone()),
                t,
                &sched,
                &IdentityCodec,
                bbox,
                &reference,
                &FaceEmbedder,
                &w,
            )
            .unwrap();
            assert_eq!(got.is_some(), expect_active, "t={t}");
            if !expect_active {
                // gating adds nothing to the computation graph beyond the leaf
                assert_eq!(tape.len(), before + 1, "t={t}");
            }
        }
        // out-of-range timesteps are rejected
        let tape = Tape::new();
        let z = Tensor::zeros(&[3, 32, 32]);
        let r = identity_loss(
            &tape, &z, tape.leaf(z.clone()), 1001, &sched, &IdentityCodec,
            bbox, &reference, &FaceEmbedder, &w,
        );
        assert!(r.is_err());
    }

    #[test]
    fn identity_loss_zero_for_perfect_prediction_of_self() {
        // If eps_pred recovers x0 exactly and the reference IS x0's own face
        // crop, the embeddings coincide and the loss vanishes.
        let sched = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let (x0, bbox, _) = face_fixture();
        let self_reference = crop(&x0, bbox);
        let w = LossWeights { r_t: 25, ..weights() };
        let mut rng = substream(6, stream::NOISE, 0, 0);
        let eps = normal_tensor(&mut rng, &[3, 32, 32]);
        let t = 10;
        let z_t = sched.forward_noise(&x0, t, &eps).unwrap();

        let tape = Tape::new();
        let loss = identity_loss(
            &tape, &z_t, tape.leaf(eps.clone()), t, &sched, &IdentityCodec,
            bbox, &self_reference, &FaceEmbedder, &w,
        )
        .unwrap()
        .unwrap();
        let v = tape.value(loss).item();
        assert!(v.abs() < 1e-9, "loss {v:.3e}");
    }

    #[test]
    fn identity_loss_positive_for_different_identity() {
        let sched = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let (x0, bbox, _) = face_fixture();
        // reference from a very different identity
        let em = EmotionTable::default_table();
        let other = FaceSpec {
            identity: IdentityParams { hue: 0.62, ecc: 0.9, eyespan: 0.1 },
            expression: "neutral".into(),
            gender: "woman".into(),
            background_id: 0,
        };
        let o = render_face(&other, 5, 32, &em).unwrap();
        let reference = crop(&o.image, o.bbox);

        let w = LossWeights { r_t: 25, ..weights() };
        let mut rng = substream(7, stream::NOISE, 0, 0);
        let eps = normal_tensor(&mut rng, &[3, 32, 32]);
        let t = 5;
        let z_t = sched.forward_noise(&x0, t, &eps).unwrap();
        let tape = Tape::new();
        let loss = identity_loss(
            &tape, &z_t, tape.leaf(eps.clone()), t, &sched, &IdentityCodec,
            bbox, &reference, &FaceEmbedder, &w,
        )
        .unwrap()
        .unwrap();
        let v = tape.value(loss).item();
        assert!(v > 0.01 && v <= 2.0, "loss {v}");
    }

    #[test]
    fn cosine_distance_hits_two_for_antiparallel() {
        let tape = Tape::new();
        let r = Tensor::new(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let v = tape.leaf(r.scale(-2.5));
        let d = cosine_distance_var(&tape, v, &r).unwrap();
        assert!((tape.value(d).item() - 2.0).abs() < 1e-12);
        // zero vectors are rejected, not clamped
        let z = tape.leaf(Tensor::zeros(&[3]));
        assert!(cosine_distance_var(&tape, z, &r).is_err());
        assert!(cosine_distance_var(&tape, v, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn identity_loss_rejects_degenerate_faces() {
        let sched = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let (x0, bbox, reference) = face_fixture();
        let w = LossWeights { r_t: 25, ..weights() };

        // gray reference -> zero-mass embedding -> error
        let gray = Tensor::full(&[3, 8, 8], 0.5);
        let z_t = sched.forward_noise(&x0, 3, &Tensor::zeros(&[3, 32, 32])).unwrap();
        let tape = Tape::new();
        let r = identity_loss(
            &tape, &z_t, tape.leaf(Tensor::zeros(&[3, 32, 32])), 3, &sched,
            &IdentityCodec, bbox, &gray, &FaceEmbedder, &w,
        );
        assert!(r.is_err());

        // prediction that reconstructs a pure gray image -> degenerate too
        let gray_img = Tensor::full(&[3, 32, 32], 0.5);
        let eps = Tensor::zeros(&[3, 32, 32]);
        let z_t = sched.forward_noise(&gray_img, 3, &eps).unwrap();
        let tape = Tape::new();
        let r = identity_loss(
            &tape, &z_t, tape.leaf(eps), 3, &sched, &IdentityCodec,
            bbox, &reference, &FaceEmbedder, &w,
        );
        assert!(r.is_err());
    }

    #[test]
    fn identity_loss_gradient_matches_finite_differences() {
        let sched = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let em = EmotionTable::default_table();
        let spec = FaceSpec {
            identity: IdentityParams { hue: 0.3, ecc: 0.5, eyespan: 0.5 },
            expression: "neutral".into(),
            gender: "man".into(),
            background_id: 1,
        };
        let out = render_face(&spec, 11, 16, &em).unwrap();
        let reference = crop(&out.image, out.bbox);
        let w = LossWeights { r_t: 25, ..weights() };
        let t = 8;
        let mut rng = substream(8, stream::NOISE, 0, 0);
        let eps_true = normal_tensor(&mut rng, &[3, 16, 16]);
        let z_t = sched.forward_noise(&out.image, t, &eps_true).unwrap();
        // start from a perturbed prediction so the loss is differentiable
        // at a generic point
        let eps_pred = eps_true.add(&normal_tensor(&mut rng, &[3, 16, 16]).scale(0.05)).unwrap();

        let loss_of = |p: &Tensor| -> f64 {
            let tape = Tape::new();
            let l = identity_loss(
                &tape, &z_t, tape.leaf(p.clone()), t, &sched, &IdentityCodec,
                out.bbox, &reference, &FaceEmbedder, &w,
            )
            .unwrap()
            .unwrap();
            tape.value(l).item()
        };
        let analytic = {
            let tape = Tape::new();
            let v = tape.leaf(eps_pred.clone());
            let l = identity_loss(
                &tape, &z_t, v, t, &sched, &IdentityCodec,
                out.bbox, &reference, &FaceEmbedder, &w,
            )
            .unwrap()
            .unwrap();
            tape.backward(l).wrt(v)
        };

        let h = 1e-5;
        let n = eps_pred.numel();
        let picks: Vec<usize> = (0..30).map(|k| k * n / 30).collect();
        let mut checked = 0;
        for i in picks {
            let mut pp = eps_pred.clone();
            pp.data_mut()[i] += h;
            let mut pm = eps_pred.clone();
            pm.data_mut()[i] -= h;
            let fd = (loss_of(&pp) - loss_of(&pm)) / (2.0 * h);
            let an = analytic.data()[i];
            if an.abs().max(fd.abs()) < 1e-12 {
                continue; // pixel outside the bbox: both exactly zero
            }
            checked += 1;
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8) < 1e-4,
                "i={i}: {an:.6e} vs {fd:.6e}"
            );
        }
        assert!(checked >= 5, "too few informative pixels checked");
    }

    // ---- localization loss ----

    #[test]
    fn localization_pinned_oracles() {
        let w = weights();
        // binary 4x4 mask with 4 pixels set
        let mut mdata = vec![0.0; 16];
        for i in [0usize, 1, 4, 5] {
            mdata[i] = 1.0;
        }
        let mask = FaceMask::new(Tensor::new(vec![4, 4], mdata.clone()).unwrap()).unwrap();

        // A^i = 0 everywhere -> lambda * (0 + beta * 4/16)
        let tape = Tape::new();
        let zeros = Tensor::zeros(&[16, MAX_TOKENS]);
        let layers = vec![leaf_map(&tape, 4, 4, zeros)];
        let l = localization_loss(&tape, &layers, &mask, 2, None, &w).unwrap();
        assert!((tape.value(l).item() - 2.0e-4).abs() < 1e-12);

        // A^i = 1 everywhere -> lambda * (12/16 + 0)
        let tape = Tape::new();
        let mut ones = Tensor::zeros(&[16, MAX_TOKENS]);
        for r in 0..16 {
            ones.set2(r, 2, 1.0);
        }
        let layers = vec![leaf_map(&tape, 4, 4, ones)];
        let l = localization_loss(&tape, &layers, &mask, 2, None, &w).unwrap();
        assert!((tape.value(l).item() - 7.5e-4).abs() < 1e-12);

        // A^i = M (and A^j = M) -> exactly zero
        let tape = Tape::new();
        let mut amap = Tensor::zeros(&[16, MAX_TOKENS]);
        for (r, &mv) in mdata.iter().enumerate() {
            amap.set2(r, 2, mv);
            amap.set2(r, 5, mv);
        }
        let layers = vec![leaf_map(&tape, 4, 4, amap)];
        let l = localization_loss(&tape, &layers, &mask, 2, Some(5), &w).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn emotion_row_is_dropped_when_absent() {
        let w = weights();
        let mask = FaceMask::new(Tensor::full(&[4, 4], 1.0)).unwrap();
        // emotion column violates its ceiling badly; identity column perfect
        let tape = Tape::new();
        let mut amap = Tensor::zeros(&[16, MAX_TOKENS]);
        for r in 0..16 {
            amap.set2(r, 1, 1.0); // identity column saturated inside mask
        }
        let layers = vec![leaf_map(&tape, 4, 4, amap)];
        let with_emotion = localization_loss(&tape, &layers, &mask, 1, Some(3), &w).unwrap();
        let without = localization_loss(&tape, &layers, &mask, 1, None, &w).unwrap();
        assert_eq!(tape.value(without).item(), 0.0);
        // with the emotion row, relu(gamma - 0) * M adds mu * gamma
        let expected = w.mu_expr_loc * w.gamma;
        assert!((tape.value(with_emotion).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn localization_monotonicity() {
        let w = weights();
        let mut rng = substream(9, stream::NOISE, 3, 0);
        for case in 0..30u64 {
            let mask_t = normal_tensor(&mut rng, &[4, 4]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let mask = FaceMask::new(mask_t.clone()).unwrap();
            let base = normal_tensor(&mut rng, &[16, MAX_TOKENS]).map(|v| v.abs().min(1.0));

            let eval = |m: &Tensor| -> f64 {
                let tape = Tape::new();
                let layers = vec![leaf_map(&tape, 4, 4, m.clone())];
                let l = localization_loss(&tape, &layers, &mask, 0, None, &w).unwrap();
                tape.value(l).item()
            };
            let l0 = eval(&base);

            // increase inside the mask: loss must not increase
            let mut inside_up = base.clone();
            for r in 0..16 {
                if mask_t.data()[r] >= 0.5 {
                    let v = inside_up.at2(r, 0);
                    inside_up.set2(r, 0, v + 0.3);
                }
            }
            assert!(eval(&inside_up) <= l0 + 1e-12, "case {case} inside");

            // increase outside the mask: loss must not decrease
            let mut outside_up = base.clone();
            for r in 0..16 {
                if mask_t.data()[r] < 0.5 {
                    let v = outside_up.at2(r, 0);
                    outside_up.set2(r, 0, v + 0.3);
                }
            }
            assert!(eval(&outside_up) >= l0 - 1e-12, "case {case} outside");
        }
    }

    #[test]
    fn zero_loss_characterization() {
        let w = weights();
        let mut mdata = vec![0.0; 16];
        mdata[3] = 1.0;
        mdata[7] = 1.0;
        let mask = FaceMask::new(Tensor::new(vec![4, 4], mdata.clone()).unwrap()).unwrap();

        // satisfying map: A = beta inside, 0 outside -> exactly zero
        let tape = Tape::new();
        let mut good = Tensor::zeros(&[16, MAX_TOKENS]);
        for (r, &mv) in mdata.iter().enumerate() {
            if mv >= 0.5 {
                good.set2(r, 0, w.beta);
            }
        }
        let layers = vec![leaf_map(&tape, 4, 4, good.clone())];
        let l = localization_loss(&tape, &layers, &mask, 0, None, &w).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        // any leakage outside -> positive
        let mut leak = good.clone();
        leak.set2(0, 0, 0.01);
        let layers = vec![leaf_map(&tape, 4, 4, leak)];
        let l = localization_loss(&tape, &layers, &mask, 0, None, &w).unwrap();
        assert!(tape.value(l).item() > 0.0);

        // any shortfall inside -> positive
        let mut short = good;
        short.set2(3, 0, w.beta - 0.05);
        let layers = vec![leaf_map(&tape, 4, 4, short)];
        let l = localization_loss(&tape, &layers, &mask, 0, None, &w).unwrap();
        assert!(tape.value(l).item() > 0.0);
    }

    #[test]
    fn smaller_ceiling_never_increases_loss() {
        let mut rng = substream(10, stream::NOISE, 4, 0);
        for _ in 0..20 {
            let mask_t = normal_tensor(&mut rng, &[4, 4]).map(|v| if v > 0.3 { 1.0 } else { 0.0 });
            let mask = FaceMask::new(mask_t).unwrap();
            let amap = normal_tensor(&mut rng, &[16, MAX_TOKENS]).map(|v| v.abs().min(1.0));
            let eval = |beta: f64| -> f64 {
                let w = LossWeights { beta, ..weights() };
                let tape = Tape::new();
                let layers = vec![leaf_map(&tape, 4, 4, amap.clone())];
                let l = localization_loss(&tape, &layers, &mask, 0, None, &w).unwrap();
                tape.value(l).item()
            };
            assert!(eval(0.5) <= eval(0.8) + 1e-15);
        }
    }

    #[test]
    fn localization_gradient_matches_finite_differences() {
        let w = weights();
        let mut rng = substream(11, stream::NOISE, 5, 0);
        let mask_t = normal_tensor(&mut rng, &[4, 4]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let mask = FaceMask::new(mask_t).unwrap();
        // values in [0.2, 0.7]: strictly inside both relu branches' smooth
        // regions (identity ceiling 0.8 active, emotion ceiling 0.1 inactive)
        let amap = normal_tensor(&mut rng, &[16, MAX_TOKENS]).map(|v| 0.2 + 0.5 * v.abs().min(1.0));

        let loss_of = |m: &Tensor| -> f64 {
            let tape = Tape::new();
            let layers = vec![leaf_map(&tape, 4, 4, m.clone())];
            let l = localization_loss(&tape, &layers, &mask, 1, Some(4), &w).unwrap();
            tape.value(l).item()
        };
        let analytic = {
            let tape = Tape::new();
            let v = tape.leaf(amap.clone());
            let layers = vec![AttnMap { stage: "down0", map: v, h: 4, w: 4 }];
            let l = localization_loss(&tape, &layers, &mask, 1, Some(4), &w).unwrap();
            tape.backward(l).wrt(v)
        };
        let h = 1e-6;
        for i in 0..amap.numel() {
            let mut pp = amap.clone();
            pp.data_mut()[i] += h;
            let mut pm = amap.clone();
            pm.data_mut()[i] -= h;
            let fd = (loss_of(&pp) - loss_of(&pm)) / (2.0 * h);
            let an = analytic.data()[i];
            if an.abs().max(fd.abs()) < 1e-15 {
                continue;
            }
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1e-9) < 1e-4,
                "i={i}: {an:.4e} vs {fd:.4e}"
            );
        }
    }

    #[test]
    fn localization_rejects_mismatched_resolution() {
        let w = weights();
        // 4x4 full mask but an 8x8 attention map would need upsampling
        let mask = FaceMask::new(Tensor::full(&[4, 4], 1.0)).unwrap();
        let tape = Tape::new();
        let layers = vec![leaf_map(&tape, 8, 8, Tensor::zeros(&[64, MAX_TOKENS]))];
        assert!(localization_loss(&tape, &layers, &mask, 0, None, &w).is_err());
        // empty layer list
        assert!(localization_loss(&tape, &[], &mask, 0, None, &w).is_err());
        // out-of-range token indices
        let layers = vec![leaf_map(&tape, 4, 4, Tensor::zeros(&[16, MAX_TOKENS]))];
        assert!(localization_loss(&tape, &layers, &mask, MAX_TOKENS, None, &w).is_err());
    }

    // ---- mask resampling ----

    #[test]
    fn resample_oracles() {
        // all ones stays all ones
        let ones = Tensor::full(&[4, 4], 1.0);
        let r = resample_mask(&ones, 2, 2).unwrap();
        assert_eq!(r, Tensor::full(&[2, 2], 1.0));

        // one quadrant set
        let mut q = Tensor::zeros(&[4, 4]);
        for y in 0..2 {
            for x in 0..2 {
                q.set2(y, x, 1.0);
            }
        }
        let r = resample_mask(&q, 2, 2).unwrap();
        assert_eq!(r, Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());

        // equal resolution is the identity
        let mut rng = substream(12, stream::NOISE, 6, 0);
        let m = normal_tensor(&mut rng, &[8, 8]).map(|v| v.abs().min(1.0));
        assert_eq!(resample_mask(&m, 8, 8).unwrap(), m);

        // upsampling refused
        assert!(resample_mask(&m, 16, 8).is_err());
        assert!(resample_mask(&m, 8, 16).is_err());

        // non-divisor target: 3x3 -> 2x2 with fractional overlap
        let mut m3 = Tensor::zeros(&[3, 3]);
        m3.set2(0, 0, 1.0);
        m3.set2(2, 2, 1.0);
        let r = resample_mask(&m3, 2, 2).unwrap();
        assert!((r.at2(0, 0) - 1.0 / 2.25).abs() < 1e-12);
        assert!((r.at2(1, 1) - 1.0 / 2.25).abs() < 1e-12);
        assert!(r.at2(0, 1).abs() < 1e-12);
    }

    #[test]
    fn resampled_ellipse_mass_scales_exactly() {
        let em = EmotionTable::default_table();
        let spec = FaceSpec {
            identity: IdentityParams { hue: 0.5, ecc: 0.6, eyespan: 0.4 },
            expression: "calm".into(),
            gender: "woman".into(),
            background_id: 4,
        };
        let out = render_face(&spec, 3, 32, &em).unwrap();
        let full_sum: f64 = out.mask.data().iter().sum();
        let r = resample_mask(&out.mask, 8, 8).unwrap();
        let small_sum: f64 = r.data().iter().sum();
        assert!((small_sum - full_sum / 16.0).abs() < 1e-9);
        assert!(r.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    // ---- total ----

    #[test]
    fn total_is_exact_sum_and_gradients_add() {
        // plain additivity with pinned numbers
        let tape = Tape::new();
        let n = tape.scalar(0.25);
        let i = tape.scalar(0.1);
        let l = tape.scalar(2.0e-4);
        let (tot, report) = total_loss(n, Some(i), Some(l), false);
        assert!((tape.value(tot).item() - 0.3502).abs() < 1e-12);
        assert!((report.total - (report.noise + report.identity + report.localization)).abs() < 1e-9);
        assert!(!report.gated);

        // gradient of total equals the sum of component gradients
        let mut rng = substream(13, stream::NOISE, 7, 0);
        let x = normal_tensor(&mut rng, &[4]);
        let grad_of = |which: usize| -> Tensor {
            let tape = Tape::new();
            let v = tape.leaf(x.clone());
            let a = v.mul(v).sum(); // ~ noise
            let b = v.sum().scale(0.5); // ~ identity
            let c = v.silu().mean(); // ~ localization
            let loss = match which {
                0 => a,
                1 => b,
                2 => c,
                _ => total_loss(a, Some(b), Some(c), false).0,
            };
            tape.backward(loss).wrt(v)
        };
        let (ga, gb, gc, gt) = (grad_of(0), grad_of(1), grad_of(2), grad_of(3));
        for i in 0..4 {
            let sum = ga.data()[i] + gb.data()[i] + gc.data()[i];
            assert!((gt.data()[i] - sum).abs() < 1e-12);
        }

        // missing terms report zero and contribute nothing
        let tape = Tape::new();
        let n = tape.scalar(0.5);
        let (tot, report) = total_loss(n, None, None, true);
        assert_eq!(tape.value(tot).item(), 0.5);
        assert_eq!(report.identity, 0.0);
        assert_eq!(report.localization, 0.0);
        assert!(report.gated);
    }

    #[test]
    fn gated_identity_leaves_total_gradient_untouched() {
        // With t > r_t the identity term adds no nodes, so the gradient of
        // the total through any parameter must equal noise + localization
        // exactly.
        let sched = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let (x0, bbox, reference) = face_fixture();
        let w = LossWeights { r_t: 25, ..weights() };
        let mut rng = substream(14, stream::NOISE, 8, 0);
        let eps_true = normal_tensor(&mut rng, &[3, 32, 32]);
        let t = 80; // gated
        let z_t = sched.forward_noise(&x0, t, &eps_true).unwrap();
        let pred = eps_true.add(&normal_tensor(&mut rng, &[3, 32, 32]).scale(0.1)).unwrap();

        let grad = |with_gated_id: bool| -> Tensor {
            let tape = Tape::new();
            let v = tape.leaf(pred.clone());
            let nl = noise_loss(&tape, v, &eps_true, None).unwrap();
            let id = if with_gated_id {
                identity_loss(
                    &tape, &z_t, v, t, &sched, &IdentityCodec,
                    bbox, &reference, &FaceEmbedder, &w,
                )
                .unwrap()
            } else {
                None
            };
            let (tot, rep) = total_loss(nl, id, None, id.is_none());
            assert_eq!(rep.identity, 0.0);
            tape.backward(tot).wrt(v)
        };
        let g1 = grad(true);
        let g2 = grad(false);
        let mut max_diff = 0.0f64;
        for i in 0..g1.numel() {
            max_diff = max_diff.max((g1.data()[i] - g2.data()[i]).abs());
        }
        assert!(max_diff < 1e-8, "gated identity leaked gradient: {max_diff:.3e}");
    }
}
