use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::block_select::SelectorWeights;
use crate::error::{shape_err, Error, Result};
use crate::numerics::nn::softplus_inverse;
use crate::numerics::{Rng, Tensor};
use crate::pruning::PredictorWeights;

pub const INIT_STD: f64 = 0.02;
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 0.1);
pub const ARCHIVE_SCHEMA_VERSION: u32 = 1;

/// Parameters of one scan direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionWeights {
    /// `E×k` depthwise causal filter.
    pub conv_w: Tensor,
    pub conv_b: Vec<f64>,
    /// `E×(R+2N)` producing the timescale input, `B` and `C`.
    pub x_proj: Tensor,
    /// `R×E`.
    pub dt_proj: Tensor,
    pub dt_bias: Vec<f64>,
    /// `A = −exp(a_log)`, `E×N`.
    pub a_log: Tensor,
    pub d_skip: Vec<f64>,
}

impl DirectionWeights {
    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (e, n, r, k) = (cfg.inner_dim(), cfg.n_state, cfg.dt_rank(), cfg.conv_kernel);
        let (lo, hi) = DT_INIT_RANGE;
        Self {
            conv_w: Tensor::randn(&[e, k], INIT_STD, rng),
            conv_b: vec![0.0; e],
            x_proj: Tensor::randn(&[e, r + 2 * n], INIT_STD, rng),
            dt_proj: Tensor::randn(&[r, e], INIT_STD, rng),
            dt_bias: (0..e)
                .map(|_| softplus_inverse(rng.uniform_range(lo, hi)))
                .collect(),
            a_log: Tensor::from_fn(&[e, n], |i| ((i % n) as f64 + 1.0).ln()),
            d_skip: vec![1.0; e],
        }
    }

    /// Continuous `A` (diagonal, `E×N`).
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub norm: Vec<f64>,
    /// `D×2E`; columns `[0, E)` feed the blocks, `[E, 2E)` the output gate.
    pub in_proj: Tensor,
    /// `[forward, backward]`.
    pub dirs: [DirectionWeights; 2],
    /// `E×D`.
    pub out_proj: Tensor,
    pub selector: SelectorWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    /// `(p²·C_in)×D`.
    pub patch_w: Tensor,
    pub patch_b: Vec<f64>,
    /// `P×D`, added to patch tokens only.
    pub pos_embed: Tensor,
    pub class_token: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    /// One per pruning stage.
    pub predictors: Vec<PredictorWeights>,
    pub norm_f: Vec<f64>,
    /// `D×classes`.
    pub head_w: Tensor,
    pub head_b: Vec<f64>,
}

impl ModelWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, e) = (cfg.embed_dim, cfg.inner_dim());
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                norm: vec![1.0; d],
                in_proj: Tensor::randn(&[d, 2 * e], INIT_STD, rng),
                dirs: [DirectionWeights::init(cfg, rng), DirectionWeights::init(cfg, rng)],
                out_proj: Tensor::randn(&[e, d], INIT_STD, rng),
                selector: SelectorWeights::init(d, INIT_STD, rng),
            })
            .collect();
        let predictors = (0..cfg.n_stages())
            .map(|_| PredictorWeights::random(cfg.predictor_input_dim(), cfg.predictor_hidden(), INIT_STD, rng))
            .collect();
        Ok(Self {
            patch_w: Tensor::randn(&[cfg.patch_dim(), d], INIT_STD, rng),
            patch_b: vec![0.0; d],
            pos_embed: Tensor::randn(&[cfg.num_patches(), d], INIT_STD, rng),
            class_token: Tensor::randn(&[d], INIT_STD, rng).into_data(),
            layers,
            predictors,
            norm_f: vec![1.0; d],
            head_w: Tensor::randn(&[d, cfg.num_classes], INIT_STD, rng),
            head_b: vec![0.0; cfg.num_classes],
        })
    }

    /// Flat `(name, tensor)` list in a fixed order.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let v = |x: &[f64]| Tensor::vector(x.to_vec());
        let mut out = vec![
            ("patch_w".to_string(), self.patch_w.clone()),
            ("patch_b".into(), v(&self.patch_b)),
            ("pos_embed".into(), self.pos_embed.clone()),
            ("class_token".into(), v(&self.class_token)),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("norm"), v(&lw.norm)));
            out.push((p("in_proj"), lw.in_proj.clone()));
            for (dname, dw) in ["fwd", "bwd"].iter().zip(&lw.dirs) {
                let q = |s: &str| format!("layers.{l}.{dname}.{s}");
                out.push((q("conv_w"), dw.conv_w.clone()));
                out.push((q("conv_b"), v(&dw.conv_b)));
                out.push((q("x_proj"), dw.x_proj.clone()));
                out.push((q("dt_proj"), dw.dt_proj.clone()));
                out.push((q("dt_bias"), v(&dw.dt_bias)));
                out.push((q("a_log"), dw.a_log.clone()));
                out.push((q("d_skip"), v(&dw.d_skip)));
            }
            out.push((p("out_proj"), lw.out_proj.clone()));
            out.push((p("selector.w"), lw.selector.w.clone()));
            out.push((p("selector.b"), v(&lw.selector.b)));
        }
        for (s, pw) in self.predictors.iter().enumerate() {
            let p = |n: &str| format!("predictors.{s}.{n}");
            out.push((p("w1"), pw.w1.clone()));
            out.push((p("b1"), v(&pw.b1)));
            out.push((p("w2"), pw.w2.clone()));
            out.push((p("b2"), v(&pw.b2)));
        }
        out.push(("norm_f".into(), v(&self.norm_f)));
        out.push(("head_w".into(), self.head_w.clone()));
        out.push(("head_b".into(), v(&self.head_b)));
        out
    }

    /// Inverse of [`ModelWeights::to_named`]; every shape is checked against
    /// a freshly initialised template for `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut template = Self::init(cfg, &mut Rng::new(0))?;
        let expected = template.to_named();
        if named.len() != expected.len() {
            return Err(Error::Config(format!(
                "archive has {} tensors, config needs {}",
                named.len(),
                expected.len()
            )));
        }
        let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = named
                .remove(name)
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))?;
            if t.shape() != like.shape() {
                return shape_err("weight archive", like.shape(), t.shape());
            }
            Ok(t)
        };
        let mut values = BTreeMap::new();
        for (name, like) in &expected {
            values.insert(name.clone(), take(name, like)?);
        }
        let mut get = |name: &str| values.remove(name).expect("checked above");
        let vec = |t: Tensor| t.into_data();
        template.patch_w = get("patch_w");
        template.patch_b = vec(get("patch_b"));
        template.pos_embed = get("pos_embed");
        template.class_token = vec(get("class_token"));
        for (l, lw) in template.layers.iter_mut().enumerate() {
            lw.norm = vec(get(&format!("layers.{l}.norm")));
            lw.in_proj = get(&format!("layers.{l}.in_proj"));
            for (dname, dw) in ["fwd", "bwd"].iter().zip(lw.dirs.iter_mut()) {
                let q = |s: &str| format!("layers.{l}.{dname}.{s}");
                dw.conv_w = get(&q("conv_w"));
                dw.conv_b = vec(get(&q("conv_b")));
                dw.x_proj = get(&q("x_proj"));
                dw.dt_proj = get(&q("dt_proj"));
                dw.dt_bias = vec(get(&q("dt_bias")));
                dw.a_log = get(&q("a_log"));
                dw.d_skip = vec(get(&q("d_skip")));
            }
            lw.out_proj = get(&format!("layers.{l}.out_proj"));
            lw.selector.w = get(&format!("layers.{l}.selector.w"));
            let b = get(&format!("layers.{l}.selector.b"));
            lw.selector.b = [b.data()[0], b.data()[1]];
        }
        for (s, pw) in template.predictors.iter_mut().enumerate() {
            pw.w1 = get(&format!("predictors.{s}.w1"));
            pw.b1 = vec(get(&format!("predictors.{s}.b1")));
            pw.w2 = get(&format!("predictors.{s}.w2"));
            pw.b2 = vec(get(&format!("predictors.{s}.b2")));
        }
        template.norm_f = vec(get("norm_f"));
        template.head_w = get("head_w");
        template.head_b = vec(get("head_b"));
        Ok(template)
    }

    /// Writes `<stem>.bin` (little-endian f64) and `<stem>.json` (manifest).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.to_named() {
            entries.push(ManifestEntry {
                name,
                shape: t.shape().to_vec(),
                offset: bytes.len() as u64,
            });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            schema_version: ARCHIVE_SCHEMA_VERSION,
            tensors: entries,
        };
        std::fs::write(stem.with_extension("bin"), bytes)?;
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(cfg: &ModelConfig, stem: &Path) -> Result<Self> {
        let bytes = std::fs::read(stem.with_extension("bin"))?;
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        if manifest.schema_version != ARCHIVE_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported archive schema {}",
                manifest.schema_version
            )));
        }
        let mut named = BTreeMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            let raw = bytes
                .get(start..end)
                .ok_or_else(|| Error::Config(format!("tensor {} overruns archive", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            named.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Self::from_named(cfg, named)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}
