//! Noise-prediction UNet with text/face cross-attention.
//!
//! Three resolution levels. Each level is conv + time bias + SiLU followed by
//! a residual cross-attention block over the 16 conditioning rows; the middle
//! runs two attention blocks back to back. The final projection is
//! zero-initialized so an untrained model predicts exactly zero noise.
//!
//! Attention queries come from spatial positions, keys/values from the
//! conditioning rows, so each recorded attention map is [positions, tokens]
//! and every row is a probability distribution over the 16 token slots.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conditioning::MAX_TOKENS;
use crate::error::{Error, Result};
use crate::params::{normal_init, Bound, ParamSet};
use crate::tensor::Tensor;

/// Stage labels for the six attention layers, outermost first on each side.
pub const ATTN_STAGES: [&str; 6] = ["down0", "down1", "mid0", "mid1", "up1", "up0"];

const TIME_SINUSOID_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Square image side; must be divisible by 4.
    pub image_size: usize,
    /// Channel widths at full, half, quarter resolution.
    pub widths: [usize; 3],
    /// Total attention width (split across heads).
    pub attn_width: usize,
    pub heads: usize,
    /// Conditioning row width.
    pub cond_dim: usize,
    /// Hidden width of the time-embedding MLP.
    pub time_hidden: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.widths.iter().any(|&w| w == 0)
            || self.attn_width == 0
            || self.heads == 0
            || self.cond_dim == 0
            || self.time_hidden == 0
        {
            return Err(Error::config("denoiser widths must be positive"));
        }
        if self.attn_width % self.heads != 0 {
            return Err(Error::config(format!(
                "attention width {} not divisible by {} heads",
                self.attn_width, self.heads
            )));
        }
        Ok(())
    }

    /// Full-size configuration; the trainable total (with the augmentation
    /// head) stays under 100k parameters.
    pub fn full() -> Self {
        DenoiserConfig {
            image_size: 32,
            widths: [16, 32, 64],
            attn_width: 16,
            heads: 2,
            cond_dim: 64,
            time_hidden: 32,
        }
    }

    /// Small configuration for fast end-to-end training runs.
    pub fn desk() -> Self {
        DenoiserConfig {
            image_size: 32,
            widths: [8, 16, 32],
            attn_width: 8,
            heads: 2,
            cond_dim: 32,
            time_hidden: 32,
        }
    }

    /// Tiny configuration for finite-difference gradient checking.
    pub fn gradcheck() -> Self {
        DenoiserConfig {
            image_size: 16,
            widths: [2, 3, 4],
            attn_width: 2,
            heads: 1,
            cond_dim: 8,
            time_hidden: 8,
        }
    }

    /// Channel count feeding each attention stage.
    fn stage_channels(&self) -> [usize; 6] {
        let [w0, w1, w2] = self.widths;
        [w0, w1, w2, w2, w1, w0]
    }
}

/// One recorded attention map: the head-averaged [positions, MAX_TOKENS]
/// matrix for a stage, plus the spatial layout of the positions.
pub struct AttnMap<'t> {
    pub stage: &'static str,
    pub map: Var<'t>,
    pub h: usize,
    pub w: usize,
}

pub struct DenoiserOutput<'t> {
    pub eps: Var<'t>,
    /// Populated only when capture was requested; capturing never changes eps.
    pub attn: Vec<AttnMap<'t>>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Denoiser { cfg })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Insert all denoiser parameters. Convolutions get fan-in-scaled
    /// Gaussian init; the output projection is zero so eps starts at zero.
    pub fn init_params<R: Rng>(&self, set: &mut ParamSet, rng: &mut R) -> Result<()> {
        let [w0, w1, w2] = self.cfg.widths;
        let convs: [(&str, usize, usize); 5] = [
            ("in", 3, w0),
            ("d1", w0, w1),
            ("m1", w1, w2),
            ("u1", w2 + w1, w1),
            ("u0", w1 + w0, w0),
        ];
        for (name, ci, co) in convs {
            let scale = 1.0 / ((ci * 9) as f64).sqrt();
            set.insert(&format!("conv.{name}.w"), normal_init(rng, &[co, ci, 3, 3], scale))?;
            set.insert(&format!("conv.{name}.b"), Tensor::zeros(&[co]))?;
        }
        set.insert("conv.out.w", Tensor::zeros(&[3, w0, 3, 3]))?;
        set.insert("conv.out.b", Tensor::zeros(&[3]))?;

        let th = self.cfg.time_hidden;
        let s1 = 1.0 / (TIME_SINUSOID_DIM as f64).sqrt();
        let s2 = 1.0 / (th as f64).sqrt();
        set.insert("time.l1.w", normal_init(rng, &[TIME_SINUSOID_DIM, th], s1))?;
        set.insert("time.l1.b", Tensor::zeros(&[th]))?;
        set.insert("time.l2.w", normal_init(rng, &[th, th], s2))?;
        set.insert("time.l2.b", Tensor::zeros(&[th]))?;
        for (name, co) in [("in", w0), ("d1", w1), ("m1", w2), ("u1", w1), ("u0", w0)] {
            set.insert(&format!("time.proj.{name}.w"), normal_init(rng, &[th, co], s2))?;
            set.insert(&format!("time.proj.{name}.b"), Tensor::zeros(&[co]))?;
        }

        let dh = self.cfg.attn_width / self.cfg.heads;
        let dc = self.cfg.cond_dim;
        for (l, c) in self.cfg.stage_channels().into_iter().enumerate() {
            for head in 0..self.cfg.heads {
                let p = format!("attn{l}.h{head}");
                let sq = 1.0 / (c as f64).sqrt();
                let sk = 1.0 / (dc as f64).sqrt();
                let so = 1.0 / (dh as f64).sqrt();
                set.insert(&format!("{p}.wq"), normal_init(rng, &[c, dh], sq))?;
                set.insert(&format!("{p}.wk"), normal_init(rng, &[dc, dh], sk))?;
                set.insert(&format!("{p}.wv"), normal_init(rng, &[dc, dh], sk))?;
                set.insert(&format!("{p}.wo"), normal_init(rng, &[dh, c], so))?;
            }
        }
        Ok(())
    }

    /// Predict the noise in `z_t`. `t` is the 1-indexed timestep; `cond` is
    /// the [MAX_TOKENS, cond_dim] conditioning matrix. With `capture`, the
    /// head-averaged attention map of every stage is returned as live tape
    /// nodes; the eps graph is identical either way.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        z_t: Var<'t>,
        t: usize,
        cond: Var<'t>,
        capture: bool,
    ) -> Result<DenoiserOutput<'t>> {
        let s = self.cfg.image_size;
        if z_t.shape() != vec![3, s, s] {
            return Err(Error::Shape {
                context: "denoiser input",
                expected: vec![3, s, s],
                got: z_t.shape(),
            });
        }
        if cond.shape() != vec![MAX_TOKENS, self.cfg.cond_dim] {
            return Err(Error::Shape {
                context: "denoiser conditioning",
                expected: vec![MAX_TOKENS, self.cfg.cond_dim],
                got: cond.shape(),
            });
        }
        if t == 0 {
            return Err(Error::invalid("timesteps are 1-indexed"));
        }

        // Time embedding: sinusoid features -> two dense+SiLU layers.
        let sin = tape.leaf(time_sinusoid(t));
        let tv = sin
            .matmul(bound.var("time.l1.w"))
            .add_row_bias(bound.var("time.l1.b"))
            .silu()
            .matmul(bound.var("time.l2.w"))
            .add_row_bias(bound.var("time.l2.b"))
            .silu(); // [1, th]
        let tbias = |name: &str| -> Var<'t> {
            let co = tv
                .matmul(bound.var(&format!("time.proj.{name}.w")))
                .add_row_bias(bound.var(&format!("time.proj.{name}.b")));
            let n = co.shape()[1];
            co.reshape(&[n])
        };

        let mut maps = Vec::new();
        let mut attend = |x: Var<'t>, stage_idx: usize| -> Var<'t> {
            let (out, map) = self.attention(bound, x, cond, stage_idx, capture);
            if let Some(m) = map {
                let sh = x.shape();
                maps.push(AttnMap {
                    stage: ATTN_STAGES[stage_idx],
                    map: m,
                    h: sh[1],
                    w: sh[2],
                });
            }
            out
        };

        let conv = |x: Var<'t>, name: &str| -> Var<'t> {
            x.conv3x3(bound.var(&format!("conv.{name}.w")))
                .add_channel_bias(bound.var(&format!("conv.{name}.b")))
        };

        let h0 = conv(z_t, "in").add_channel_bias(tbias("in")).silu();
        let h0 = attend(h0, 0);

        let h1 = conv(h0.avg_pool2(), "d1").add_channel_bias(tbias("d1")).silu();
        let h1 = attend(h1, 1);

        let h2 = conv(h1.avg_pool2(), "m1").add_channel_bias(tbias("m1")).silu();
        let h2 = attend(h2, 2);
        let h2 = attend(h2, 3);

        let u1 = h2.upsample2().concat_channels(h1);
        let h3 = conv(u1, "u1").add_channel_bias(tbias("u1")).silu();
        let h3 = attend(h3, 4);

        let u0 = h3.upsample2().concat_channels(h0);
        let h4 = conv(u0, "u0").add_channel_bias(tbias("u0")).silu();
        let h4 = attend(h4, 5);

        let eps = conv(h4, "out");
        Ok(DenoiserOutput { eps, attn: maps })
    }

    /// Residual cross-attention block. Returns (x + attention output, and the
    /// head-averaged map when capture is on).
    fn attention<'t>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        cond: Var<'t>,
        stage_idx: usize,
        capture: bool,
    ) -> (Var<'t>, Option<Var<'t>>) {
        let sh = x.shape();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let p = h * w;
        let dh = self.cfg.attn_width / self.cfg.heads;
        let xf = x.reshape(&[c, p]).transpose(); // [P, C]

        let mut acc: Option<Var<'t>> = None;
        let mut head_maps: Vec<Var<'t>> = Vec::new();
        for head in 0..self.cfg.heads {
            let pfx = format!("attn{stage_idx}.h{head}");
            let q = xf.matmul(bound.var(&format!("{pfx}.wq"))); // [P, dh]
            let k = cond.matmul(bound.var(&format!("{pfx}.wk"))); // [16, dh]
            let v = cond.matmul(bound.var(&format!("{pfx}.wv"))); // [16, dh]
            let logits = q.matmul(k.transpose()).scale(1.0 / (dh as f64).sqrt());
            let a = logits.softmax_rows(); // [P, 16]
            let o = a.matmul(v).matmul(bound.var(&format!("{pfx}.wo"))); // [P, C]
            acc = Some(match acc {
                None => o,
                Some(prev) => prev.add(o),
            });
            if capture {
                head_maps.push(a);
            }
        }
        let out = x.add(acc.expect("at least one head").transpose().reshape(&[c, h, w]));
        let map = if capture {
            let mut m = head_maps[0];
            for hm in &head_maps[1..] {
                m = m.add(*hm);
            }
            Some(m.scale(1.0 / self.cfg.heads as f64))
        } else {
            None
        };
        (out, map)
    }
}

fn time_sinusoid(t: usize) -> Tensor {
    let mut v = Tensor::zeros(&[1, TIME_SINUSOID_DIM]);
    for j in 0..TIME_SINUSOID_DIM {
        let freq = 10000f64.powf(-2.0 * (j / 2) as f64 / TIME_SINUSOID_DIM as f64);
        let angle = t as f64 * freq;
        v.set2(0, j, if j % 2 == 0 { angle.sin() } else { angle.cos() });
    }
    v
}
