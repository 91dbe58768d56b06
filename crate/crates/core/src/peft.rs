//! LoRA, bottleneck adapters, prefix tuning, and merging LoRA updates into
//! base weights.
//!
//! Shapes follow the column-vector convention of the base model: a linear
//! site holds `W [d_out × d_in]` and computes `W·x`. A LoRA adapter adds
//! `scale · A·(B·x)` with `A [d_out × r]` and `B [r × d_in]`; the `d_out × d_in`
//! product `A·B` is never formed during the forward pass.
//!
//! Adapters act on row vectors `x [s × d]`: `x + GeLU(x·W_down)·W_up` with
//! `W_down [d × r]` and `W_up [r × d]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    attention, AttentionMask, LinearSite, SiteId, SiteKind, TransformerConfig, TransformerModel,
    Weight,
};
use crate::quantize::QuantizedMatrix;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the Gaussian `A` factor at initialization.
pub const LORA_INIT_STD: f64 = 0.02;
/// Default rank.
pub const DEFAULT_RANK: usize = 8;
const PREFIX_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lora,
    Adapter,
    Prefix,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Adapter => "adapter",
            Method::Prefix => "prefix",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Method::Lora),
            "adapter" => Ok(Method::Adapter),
            "prefix" => Ok(Method::Prefix),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BaseMode {
    #[default]
    Float32,
    Quantized4,
}

/// A base weight as seen by the tape: a recorded dense tensor or a frozen
/// 4-bit matrix.
#[derive(Clone, Debug)]
pub enum BaseVar {
    Dense(Var),
    Quantized(Arc<QuantizedMatrix>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub site: SiteId,
    /// `[d_out × r]`
    pub a: Tensor<f32>,
    /// `[r × d_in]`
    pub b: Tensor<f32>,
    pub scale: f32,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `scale · A·B`, the dense update folded in by [`merge`].
    pub fn delta(&self) -> Result<Tensor<f32>> {
        let ab = self.a.matmul(&self.b)?;
        Ok(ab.map(|v| v * self.scale))
    }

    /// `W·x + scale·A·(B·x)` for column vectors `x [d_in × n]`.
    pub fn forward(&self, w: &Weight, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let base = bind_weight(&mut tape, w);
        let lora = LoraVars {
            a: tape.constant(self.a.clone()),
            b: tape.constant(self.b.clone()),
            scale: self.scale as f64,
        };
        let xv = tape.constant(x.clone());
        let y = lora_forward(&mut tape, &base, Some(&lora), xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Trainable parameters of a rank-`r` LoRA pair: `d_in·r + r·d_out`.
pub fn lora_param_count(d_in: usize, d_out: usize, r: usize) -> usize {
    d_in * r + r * d_out
}

/// Fresh LoRA pair: Gaussian `A`, zero `B`, so `A·B = 0`.
pub fn lora_init(
    site: SiteId,
    d_in: usize,
    d_out: usize,
    r: usize,
    seed: u64,
) -> Result<LoraAdapter> {
    if r == 0 || r > d_in.min(d_out) {
        return Err(Error::Rank { r, d_in, d_out });
    }
    let mut rng = rng::substream(seed, &format!("{site}.lora"));
    Ok(LoraAdapter {
        site,
        a: Tensor::randn(&[d_out, r], LORA_INIT_STD, &mut rng),
        b: Tensor::zeros(&[r, d_in]),
        scale: 1.0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    pub site: SiteId,
    /// `[d × r]`
    pub down: Tensor<f32>,
    /// `[r × d]`
    pub up: Tensor<f32>,
}

impl AdapterLayer {
    /// Gaussian `W_down` with std `1/√d`, zero `W_up`: the adapter starts
    /// as the identity.
    pub fn init(site: SiteId, d: usize, r: usize, seed: u64) -> Result<Self> {
        if r == 0 || r >= d {
            return Err(Error::Config(format!(
                "adapter bottleneck {r} must satisfy 1 <= r < {d}"
            )));
        }
        let mut rng = rng::substream(seed, &format!("{site}.adapter"));
        Ok(AdapterLayer {
            site,
            down: Tensor::randn(&[d, r], (d as f64).powf(-0.5), &mut rng),
            up: Tensor::zeros(&[r, d]),
        })
    }

    pub fn num_params(&self) -> usize {
        self.down.len() + self.up.len()
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let down = tape.constant(self.down.clone());
        let up = tape.constant(self.up.clone());
        let y = adapter_forward(&mut tape, xv, down, up)?;
        Ok(tape.value(y).clone())
    }
}

/// Learned key/value rows prepended to one layer's attention. Columns are
/// the concatenated heads, so head `h` uses columns `h·d_k .. (h+1)·d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixAdapter {
    pub layer: usize,
    /// `[p × d_model]`
    pub pk: Tensor<f32>,
    /// `[p × d_model]`
    pub pv: Tensor<f32>,
}

impl PrefixAdapter {
    pub fn init(layer: usize, p: usize, d_model: usize, seed: u64) -> Result<Self> {
        if p == 0 {
            return Err(Error::Config("prefix length must be at least 1".into()));
        }
        let mut rng = rng::substream(seed, &format!("layers.{layer}.prefix"));
        Ok(PrefixAdapter {
            layer,
            pk: Tensor::randn(&[p, d_model], PREFIX_INIT_STD, &mut rng),
            pv: Tensor::randn(&[p, d_model], PREFIX_INIT_STD, &mut rng),
        })
    }

    pub fn len(&self) -> usize {
        self.pk.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_params(&self) -> usize {
        self.pk.len() + self.pv.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PeftAdapter {
    Lora(LoraAdapter),
    Adapter(AdapterLayer),
    Prefix(PrefixAdapter),
}

impl PeftAdapter {
    pub fn method(&self) -> Method {
        match self {
            PeftAdapter::Lora(_) => Method::Lora,
            PeftAdapter::Adapter(_) => Method::Adapter,
            PeftAdapter::Prefix(_) => Method::Prefix,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            PeftAdapter::Lora(l) => l.num_params(),
            PeftAdapter::Adapter(a) => a.num_params(),
            PeftAdapter::Prefix(p) => p.num_params(),
        }
    }

    /// Tensor-name suffixes paired with tensors, in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &Tensor<f32>); 2] {
        match self {
            PeftAdapter::Lora(l) => [("lora_a", &l.a), ("lora_b", &l.b)],
            PeftAdapter::Adapter(a) => [("down", &a.down), ("up", &a.up)],
            PeftAdapter::Prefix(p) => [("pk", &p.pk), ("pv", &p.pv)],
        }
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<f32>; 2] {
        match self {
            PeftAdapter::Lora(l) => [&mut l.a, &mut l.b],
            PeftAdapter::Adapter(a) => [&mut a.down, &mut a.up],
            PeftAdapter::Prefix(p) => [&mut p.pk, &mut p.pv],
        }
    }
}

/// Settings for building a fresh [`PeftSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeftConfig {
    pub method: Method,
    /// LoRA rank, adapter bottleneck width, or prefix length.
    pub rank: usize,
    /// Multiplier on `A·B`.
    #[serde(default = "default_scale")]
    pub scale: f32,
    /// Linear sites receiving LoRA pairs.
    #[serde(default = "default_lora_sites")]
    pub lora_sites: Vec<LinearSite>,
}

fn default_scale() -> f32 {
    1.0
}

fn default_lora_sites() -> Vec<LinearSite> {
    vec![LinearSite::Q, LinearSite::K, LinearSite::V]
}

impl PeftConfig {
    pub fn lora(rank: usize) -> Self {
        PeftConfig {
            method: Method::Lora,
            rank,
            scale: 1.0,
            lora_sites: default_lora_sites(),
        }
    }

    pub fn adapter(rank: usize) -> Self {
        PeftConfig {
            method: Method::Adapter,
            ..Self::lora(rank)
        }
    }

    pub fn prefix(len: usize) -> Self {
        PeftConfig {
            method: Method::Prefix,
            ..Self::lora(len)
        }
    }
}

/// All adapters of one tuning run, keyed by site.
#[derive(Clone, Debug, PartialEq)]
pub struct PeftSet {
    method: Method,
    base_mode: BaseMode,
    adapters: BTreeMap<SiteId, PeftAdapter>,
}

impl PeftSet {
    pub fn new(method: Method, base_mode: BaseMode) -> Result<Self> {
        if base_mode == BaseMode::Quantized4 && method != Method::Lora {
            return Err(Error::Config(format!(
                "a 4-bit base supports only LoRA adapters, not {method}"
            )));
        }
        Ok(PeftSet {
            method,
            base_mode,
            adapters: BTreeMap::new(),
        })
    }

    /// Builds freshly initialized adapters for every site `cfg` selects.
    pub fn init(
        model: &TransformerConfig,
        cfg: &PeftConfig,
        base_mode: BaseMode,
        seed: u64,
    ) -> Result<Self> {
        let mut set = PeftSet::new(cfg.method, base_mode)?;
        for layer in 0..model.n_layers {
            match cfg.method {
                Method::Lora => {
                    for &site in &cfg.lora_sites {
                        let (d_in, d_out) = model.linear_dims(site);
                        let mut ad =
                            lora_init(SiteId::linear(layer, site), d_in, d_out, cfg.rank, seed)?;
                        ad.scale = cfg.scale;
                        set.insert(PeftAdapter::Lora(ad))?;
                    }
                }
                Method::Adapter => {
                    for kind in [SiteKind::AfterAttention, SiteKind::AfterFfn] {
                        let site = SiteId { layer, kind };
                        set.insert(PeftAdapter::Adapter(AdapterLayer::init(
                            site,
                            model.d_model,
                            cfg.rank,
                            seed,
                        )?))?;
                    }
                }
                Method::Prefix => {
                    set.insert(PeftAdapter::Prefix(PrefixAdapter::init(
                        layer,
                        cfg.rank,
                        model.d_model,
                        seed,
                    )?))?;
                }
            }
        }
        Ok(set)
    }

    /// Adds an adapter; at most one per site, all of the set's method.
    pub fn insert(&mut self, adapter: PeftAdapter) -> Result<()> {
        if adapter.method() != self.method {
            return Err(Error::Config(format!(
                "cannot add a {} adapter to a {} set",
                adapter.method(),
                self.method
            )));
        }
        let site = match &adapter {
            PeftAdapter::Lora(l) => {
                if !matches!(l.site.kind, SiteKind::Linear(_)) {
                    return Err(Error::Config(format!(
                        "LoRA needs a linear site, got {}",
                        l.site
                    )));
                }
                l.site
            }
            PeftAdapter::Adapter(a) => {
                if !matches!(a.site.kind, SiteKind::AfterAttention | SiteKind::AfterFfn) {
                    return Err(Error::Config(format!(
                        "adapter needs a sublayer site, got {}",
                        a.site
                    )));
                }
                a.site
            }
            PeftAdapter::Prefix(p) => SiteId {
                layer: p.layer,
                kind: SiteKind::Prefix,
            },
        };
        if self.adapters.contains_key(&site) {
            return Err(Error::Config(format!("site {site} already has an adapter")));
        }
        self.adapters.insert(site, adapter);
        Ok(())
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn base_mode(&self) -> BaseMode {
        self.base_mode
    }

    pub fn adapters(&self) -> &BTreeMap<SiteId, PeftAdapter> {
        &self.adapters
    }

    pub fn get(&self, site: &SiteId) -> Option<&PeftAdapter> {
        self.adapters.get(site)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.adapters.values().map(PeftAdapter::num_params).sum()
    }

    /// Trainable tensors in site order, two per adapter.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.adapters
            .values_mut()
            .flat_map(|a| a.tensors_mut())
            .collect()
    }

    /// Checks that every adapter fits the model it will be attached to.
    pub fn check_compatible(&self, model: &TransformerModel) -> Result<()> {
        let cfg = model.config();
        let quantized = model.is_quantized();
        if quantized && self.method != Method::Lora {
            return Err(Error::Config(format!(
                "a 4-bit base supports only LoRA adapters, not {}",
                self.method
            )));
        }
        for (site, adapter) in &self.adapters {
            if site.layer >= cfg.n_layers {
                return Err(Error::Config(format!(
                    "site {site} is beyond layer count {}",
                    cfg.n_layers
                )));
            }
            let ok = match (adapter, site.kind) {
                (PeftAdapter::Lora(l), SiteKind::Linear(ls)) => {
                    let (d_in, d_out) = cfg.linear_dims(ls);
                    l.d_in() == d_in && l.d_out() == d_out && l.a.shape()[1] == l.rank()
                }
                (PeftAdapter::Adapter(a), _) => {
                    a.down.shape()[0] == cfg.d_model && a.up.shape()[1] == cfg.d_model
                }
                (PeftAdapter::Prefix(p), _) => {
                    p.pk.shape()[1] == cfg.d_model && p.pv.shape() == p.pk.shape()
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "adapter at {site} does not fit the model"
                )));
            }
        }
        Ok(())
    }

    /// Records every adapter tensor on the tape.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> PeftVars {
        let mut bound = BTreeMap::new();
        let mut order = Vec::new();
        for (site, adapter) in &self.adapters {
            let [(_, t0), (_, t1)] = adapter.tensors();
            let v0 = tape.leaf(t0.cast(), trainable);
            let v1 = tape.leaf(t1.cast(), trainable);
            order.extend([v0, v1]);
            let b = match adapter {
                PeftAdapter::Lora(l) => BoundAdapter::Lora(LoraVars {
                    a: v0,
                    b: v1,
                    scale: l.scale as f64,
                }),
                PeftAdapter::Adapter(_) => BoundAdapter::Adapter(AdapterVars { down: v0, up: v1 }),
                PeftAdapter::Prefix(_) => BoundAdapter::Prefix(PrefixVars { pk: v0, pv: v1 }),
            };
            bound.insert(*site, b);
        }
        PeftVars { bound, order }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub down: Var,
    pub up: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PrefixVars {
    pub pk: Var,
    pub pv: Var,
}

#[derive(Clone, Copy, Debug)]
enum BoundAdapter {
    Lora(LoraVars),
    Adapter(AdapterVars),
    Prefix(PrefixVars),
}

/// A [`PeftSet`] recorded on a tape.
pub struct PeftVars {
    bound: BTreeMap<SiteId, BoundAdapter>,
    order: Vec<Var>,
}

impl PeftVars {
    pub fn lora(&self, site: SiteId) -> Option<&LoraVars> {
        match self.bound.get(&site)? {
            BoundAdapter::Lora(l) => Some(l),
            _ => None,
        }
    }

    pub fn adapter(&self, site: SiteId) -> Option<&AdapterVars> {
        match self.bound.get(&site)? {
            BoundAdapter::Adapter(a) => Some(a),
            _ => None,
        }
    }

    pub fn prefix(&self, layer: usize) -> Option<&PrefixVars> {
        let site = SiteId {
            layer,
            kind: SiteKind::Prefix,
        };
        match self.bound.get(&site)? {
            BoundAdapter::Prefix(p) => Some(p),
            _ => None,
        }
    }

    /// Leaves in the same order as [`PeftSet::tensors_mut`].
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

fn bind_weight(tape: &mut Tape<f32>, w: &Weight) -> BaseVar {
    match w {
        Weight::F32(t) => BaseVar::Dense(tape.constant(t.clone())),
        Weight::Q4(q) => BaseVar::Quantized(Arc::clone(q)),
    }
}

/// `W·x + scale·A·(B·x)` for column vectors `x [d_in × n]`, evaluated right
/// to left. A 4-bit `W` is dequantized on the fly and receives no gradient.
pub fn lora_forward<T: Scalar>(
    tape: &mut Tape<T>,
    w: &BaseVar,
    lora: Option<&LoraVars>,
    x: Var,
) -> Result<Var> {
    let base = match w {
        BaseVar::Dense(v) => tape.matmul(*v, x)?,
        BaseVar::Quantized(q) => tape.qmatmul(q, x)?,
    };
    let Some(l) = lora else {
        return Ok(base);
    };
    let bx = tape.matmul(l.b, x)?;
    let abx = tape.matmul(l.a, bx)?;
    let update = if l.scale == 1.0 {
        abx
    } else {
        tape.scale(abx, T::from_f64(l.scale))
    };
    tape.add(base, update)
}

/// `x + GeLU(x·W_down)·W_up` on rows `x [s × d]`.
pub fn adapter_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, down: Var, up: Var) -> Result<Var> {
    let h = tape.matmul(x, down)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, up)?;
    tape.add(x, h)
}

/// Attention over `[P_k; K]` and `[P_v; V]`. Prefix rows are visible to
/// every query; `causal` masks future real keys.
pub fn prefix_attend<T: Scalar>(
    tape: &mut Tape<T>,
    pk: Var,
    pv: Var,
    q: Var,
    k: Var,
    v: Var,
    causal: bool,
) -> Result<Var> {
    let p = tape.value(pk).dims2()?.0;
    if tape.value(pv).dims2()?.0 != p {
        return Err(Error::shape(
            "prefix_attend",
            tape.shape(pk),
            tape.shape(pv),
        ));
    }
    let keys = tape.concat_rows(&[pk, k])?;
    let values = tape.concat_rows(&[pv, v])?;
    let mask = if causal {
        AttentionMask::Causal { prefix_len: p }
    } else {
        AttentionMask::None
    };
    attention(tape, q, keys, values, mask)
}

/// Folds every LoRA update into its base weight: `W ← W + scale·A·B`.
/// A 4-bit base is dequantized first, so the result is all `f32`.
pub fn merge(model: &TransformerModel, peft: &PeftSet) -> Result<TransformerModel> {
    match peft.method() {
        Method::Lora => {}
        Method::Adapter => return Err(Error::NotMergeable("adapter")),
        Method::Prefix => return Err(Error::NotMergeable("prefix")),
    }
    peft.check_compatible(model)?;
    let mut merged = model.dequantized();
    for (site, adapter) in peft.adapters() {
        let PeftAdapter::Lora(l) = adapter else {
            unreachable!("LoRA set holds only LoRA adapters");
        };
        let name = site.weight_name().expect("LoRA sites are linear");
        let Some(Weight::F32(w)) = merged.params_mut().get_mut(&name) else {
            return Err(Error::Usage(format!("base model has no weight {name}")));
        };
        let delta = l.delta()?;
        for (wv, dv) in w.data_mut().iter_mut().zip(delta.data()) {
            *wv += dv;
        }
    }
    Ok(merged)
}
