//! Registration networks: a U-Net baseline, Flow U-Net variants and the
//! SVF pyramid network, all built on [`crate::autodiff`].
//!
//! Level indices run from the finest (`0`, input resolution) to the
//! coarsest (`levels - 1`); flow estimation walks them coarse to fine.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{FieldKind, GridGeometry, ScalarVolume, VectorField};
use crate::svf::BchdConfig;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Unet,
    FlowUnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    None,
    Pre,
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    Displacement,
    Svf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Propagation {
    Addition,
    Composition,
    SvfSum,
    SvfBchd,
}

macro_rules! keyword_enum {
    ($t:ty, $what:literal, $($v:ident => $s:literal),+) => {
        impl $t {
            pub fn as_str(&self) -> &'static str {
                match self { $(Self::$v => $s),+ }
            }
            pub fn parse(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    other => Err(Error::Config(format!("unknown {} '{other}'", $what))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(Variant, "variant", Unet => "unet", FlowUnet => "flowunet");
keyword_enum!(Placement, "deformation placement", None => "none", Pre => "pre", Post => "post");
keyword_enum!(Parameterization, "parameterization", Displacement => "displacement", Svf => "svf");
keyword_enum!(Propagation, "propagation", Addition => "addition", Composition => "composition",
    SvfSum => "svf_sum", SvfBchd => "svf_bchd");

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub variant: Variant,
    pub deformation_placement: Placement,
    pub parameterization: Parameterization,
    pub propagation: Propagation,
    pub bchd: BchdConfig,
    /// Squaring steps for every exponential; 0 chooses them adaptively.
    pub exp_steps: u32,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::svf(Propagation::SvfBchd)
    }
}

impl NetConfig {
    pub fn svf(propagation: Propagation) -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            variant: Variant::FlowUnet,
            deformation_placement: Placement::Pre,
            parameterization: Parameterization::Svf,
            propagation,
            bchd: BchdConfig::default(),
            exp_steps: 0,
        }
    }

    pub fn flow_unet(placement: Placement, propagation: Propagation) -> Self {
        Self {
            deformation_placement: placement,
            parameterization: Parameterization::Displacement,
            propagation,
            ..Self::svf(Propagation::SvfSum)
        }
    }

    pub fn unet() -> Self {
        Self {
            variant: Variant::Unet,
            deformation_placement: Placement::None,
            parameterization: Parameterization::Displacement,
            propagation: Propagation::Addition,
            ..Self::svf(Propagation::SvfSum)
        }
    }

    /// Named model: `unet`, `flowunet-<none|pre|post>[-<addition|composition>]`
    /// (addition when omitted), `svf_sum`, `svf_bchd`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "unet" => return Ok(Self::unet()),
            "svf_sum" => return Ok(Self::svf(Propagation::SvfSum)),
            "svf_bchd" => return Ok(Self::svf(Propagation::SvfBchd)),
            _ => {}
        }
        let mut parts = name.split('-');
        if parts.next() != Some("flowunet") {
            return Err(Error::Config(format!("unknown model '{name}'")));
        }
        let placement = Placement::parse(parts.next().unwrap_or(""))?;
        let propagation = match parts.next() {
            None => Propagation::Addition,
            Some(p @ ("addition" | "composition")) => Propagation::parse(p)?,
            Some(other) => return Err(Error::Config(format!("unknown flowunet propagation '{other}'"))),
        };
        if parts.next().is_some() {
            return Err(Error::Config(format!("unknown model '{name}'")));
        }
        Ok(Self::flow_unet(placement, propagation))
    }

    /// The canonical preset name for this configuration's family.
    pub fn name(&self) -> String {
        match (self.variant, self.parameterization) {
            (Variant::Unet, _) => "unet".into(),
            (_, Parameterization::Svf) => self.propagation.as_str().into(),
            _ => format!("flowunet-{}-{}", self.deformation_placement, self.propagation),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 {
            return Err(Error::Config("levels and base_channels must be positive".into()));
        }
        if self.levels > 6 {
            return Err(Error::Config(format!("at most 6 levels supported, got {}", self.levels)));
        }
        if self.exp_steps > 20 {
            return Err(Error::Config(format!("exp_steps must be <= 20, got {}", self.exp_steps)));
        }
        if self.variant == Variant::Unet {
            return Ok(());
        }
        let ok = match self.parameterization {
            Parameterization::Svf => matches!(self.propagation, Propagation::SvfSum | Propagation::SvfBchd),
            Parameterization::Displacement => matches!(self.propagation, Propagation::Addition | Propagation::Composition),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "propagation '{}' is not valid with parameterization '{}'",
                self.propagation, self.parameterization
            )))
        }
    }

    /// Feature channels at encoder level `e`.
    pub fn channels(&self, e: usize) -> usize {
        self.base_channels << e
    }

    /// `key=value` lines for every field, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("levels", self.levels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("variant", self.variant.to_string()),
            ("deformation_placement", self.deformation_placement.to_string()),
            ("parameterization", self.parameterization.to_string()),
            ("propagation", self.propagation.to_string()),
            ("bchd_order", self.bchd.truncation_order().to_string()),
            ("exp_steps", self.exp_steps.to_string()),
        ]
    }

    /// Applies one `key=value` setting; returns `false` for keys this type
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("{key}: expected an integer, got '{v}'")));
        match key {
            "levels" => self.levels = num(value)?,
            "base_channels" => self.base_channels = num(value)?,
            "variant" => self.variant = Variant::parse(value)?,
            "deformation_placement" => self.deformation_placement = Placement::parse(value)?,
            "parameterization" => self.parameterization = Parameterization::parse(value)?,
            "propagation" => self.propagation = Propagation::parse(value)?,
            "bchd_order" => {
                let o = u8::try_from(num(value)?).map_err(|_| Error::Config(format!("bchd_order out of range: {value}")))?;
                self.bchd = BchdConfig::new(o).map_err(|e| Error::Config(e.to_string()))?;
            }
            "exp_steps" => self.exp_steps = num(value)? as u32,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn check_input(&self, geometry: &GridGeometry) -> Result<()> {
        let m = 1usize << (self.levels - 1);
        let dims = geometry.dims();
        if dims.iter().any(|&n| n % m != 0 || n / m < 3) {
            let padded = dims.map(|n| n.div_ceil(m).max(3) * m);
            return Err(Error::Geometry(format!(
                "{} levels need every dimension divisible by {m} with at least 3 voxels at the coarsest level; \
                 got {dims:?}, pad to {padded:?}",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds every tensor to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(), names: self.names.clone() }
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters living in a particular graph.
pub struct Bound {
    pub vars: Vec<Var>,
    names: Vec<String>,
}

impl Bound {
    fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    fn conv(&self, g: &mut Graph, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let (w, b) = (self.var(&format!("{prefix}.w"))?, self.var(&format!("{prefix}.b"))?);
        g.conv3d(x, w, b, stride)
    }

    fn conv_act(&self, g: &mut Graph, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(g, prefix, x, stride)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

/// Conv layers of a configuration: `(name, in, out, zero_init)`.
fn layer_specs(cfg: &NetConfig) -> Vec<(String, usize, usize, bool)> {
    let mut v = Vec::new();
    let input = if cfg.variant == Variant::Unet { 2 } else { 1 };
    for e in 0..cfg.levels {
        let cin = if e == 0 { input } else { cfg.channels(e - 1) };
        v.push((format!("enc{e}"), cin, cfg.channels(e), false));
    }
    match cfg.variant {
        Variant::Unet => {
            for e in (0..cfg.levels.saturating_sub(1)).rev() {
                v.push((format!("up{e}"), cfg.channels(e + 1) + cfg.channels(e), cfg.channels(e), false));
            }
            v.push(("flow".into(), cfg.channels(0), 3, true));
        }
        Variant::FlowUnet => {
            for e in (0..cfg.levels).rev() {
                let c = cfg.channels(e);
                v.push((format!("dec{e}"), c, c, false));
                v.push((format!("flow{e}.c1"), 2 * c, c, false));
                v.push((format!("flow{e}.c2"), c, 3, true));
            }
        }
    }
    v
}

/// Fresh parameters: flow-emitting convolutions are zero, the rest are
/// Kaiming-uniform for the leaky slope with fan-in-scaled uniform biases.
pub fn init_parameters(cfg: &NetConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParameterSet::new();
    for (name, cin, cout, zero) in layer_specs(cfg) {
        let fan_in = (cin * 27) as f64;
        let wb = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
        let bb = 1.0 / fan_in.sqrt();
        let nw = cout * cin * 27;
        let (w, b) = if zero {
            (vec![0.0; nw], vec![0.0; cout])
        } else {
            (
                (0..nw).map(|_| rng.random_range(-wb..wb)).collect(),
                (0..cout).map(|_| rng.random_range(-bb..bb)).collect(),
            )
        };
        ps.push(format!("{name}.w"), Tensor::new(vec![cout, cin, 3, 3, 3], w)?);
        ps.push(format!("{name}.b"), Tensor::new(vec![cout], b)?);
    }
    Ok(ps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: ParameterSet,
}

/// Per-level outputs of a forward pass, coarsest first.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    /// Residual emitted by the flow block.
    pub residual: Var,
    /// Carried state after combining: velocity (svf) or displacement.
    pub state: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Full-resolution displacement.
    pub phi: Var,
    /// Full-resolution velocity for svf models.
    pub svf: Option<Var>,
    pub pyramid: Vec<LevelOutput>,
}

/// Shared encoder applied to one image; features per level, finest first.
pub fn encode(cfg: &NetConfig, p: &Bound, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
    let mut feats = Vec::with_capacity(cfg.levels);
    let mut h = x;
    for e in 0..cfg.levels {
        h = p.conv_act(g, &format!("enc{e}"), h, if e == 0 { 1 } else { 2 })?;
        feats.push(h);
    }
    Ok(feats)
}

/// The same encoder weights applied to each image separately.
pub fn encode_dual_stream(cfg: &NetConfig, p: &Bound, g: &mut Graph, f0: Var, f1: Var) -> Result<Vec<(Var, Var)>> {
    let a = encode(cfg, p, g, f0)?;
    let b = encode(cfg, p, g, f1)?;
    Ok(a.into_iter().zip(b).collect())
}

/// Carried state between pyramid levels.
#[derive(Clone, Copy, Debug)]
pub struct Carried {
    /// Velocity (svf) or displacement at the previous, coarser level.
    pub state: Var,
}

/// One coarse-to-fine step at encoder level `e`.
pub fn flow_block(
    cfg: &NetConfig,
    p: &Bound,
    g: &mut Graph,
    e: usize,
    features: (Var, Var),
    prev: Option<Carried>,
) -> Result<LevelOutput> {
    let svf = cfg.parameterization == Parameterization::Svf;
    // Previous state at this level's resolution, and the deformation it
    // implies for warping.
    let up = prev.map(|c| g.upsample2(c.state, 2.0)).transpose()?;
    let warp_by = match (up, cfg.deformation_placement) {
        (Some(u), Placement::Pre | Placement::Post) => Some(if svf { g.exp(u, cfg.exp_steps)? } else { u }),
        _ => None,
    };
    let (a, mut b) = features;
    if cfg.deformation_placement == Placement::Pre {
        if let Some(phi) = warp_by {
            b = g.warp(b, phi)?;
        }
    }
    let dec = format!("dec{e}");
    let d0 = p.conv_act(g, &dec, a, 1)?;
    let mut d1 = p.conv_act(g, &dec, b, 1)?;
    if cfg.deformation_placement == Placement::Post {
        if let Some(phi) = warp_by {
            d1 = g.warp(d1, phi)?;
        }
    }
    let h = g.hadamard(d0, d1)?;
    let h = p.conv_act(g, &format!("flow{e}.c1"), h, 1)?;
    let residual = p.conv(g, &format!("flow{e}.c2"), h, 1)?;
    let state = match up {
        None => residual,
        Some(u) => match cfg.propagation {
            Propagation::Addition | Propagation::SvfSum => g.add(u, residual)?,
            Propagation::Composition => g.compose(u, residual)?,
            Propagation::SvfBchd => g.bchd(u, residual, cfg.bchd.truncation_order())?,
        },
    };
    Ok(LevelOutput { residual, state })
}

fn forward_unet(cfg: &NetConfig, p: &Bound, g: &mut Graph, f0: Var, f1: Var) -> Result<ForwardOutput> {
    let x = g.concat(&[f0, f1])?;
    let skips = encode(cfg, p, g, x)?;
    let mut h = skips[cfg.levels - 1];
    for e in (0..cfg.levels - 1).rev() {
        let u = g.upsample2(h, 1.0)?;
        let c = g.concat(&[u, skips[e]])?;
        h = p.conv_act(g, &format!("up{e}"), c, 1)?;
    }
    let phi = p.conv(g, "flow", h, 1)?;
    Ok(ForwardOutput { phi, svf: None, pyramid: vec![LevelOutput { residual: phi, state: phi }] })
}

/// Builds the forward pass of `cfg` on `(f0, f1)` in `g`.
pub fn forward_graph(cfg: &NetConfig, p: &Bound, g: &mut Graph, f0: Var, f1: Var) -> Result<ForwardOutput> {
    cfg.validate()?;
    let (t0, t1) = (g.value(f0), g.value(f1));
    if t0.shape() != t1.shape() || !t0.is_spatial() || t0.channels() != 1 {
        return Err(Error::shape("forward", format!("{:?} vs {:?}", t0.shape(), t1.shape())));
    }
    cfg.check_input(&GridGeometry::with_dims(t0.dims())?)?;
    if cfg.variant == Variant::Unet {
        return forward_unet(cfg, p, g, f0, f1);
    }
    let feats = encode_dual_stream(cfg, p, g, f0, f1)?;
    let mut pyramid = Vec::with_capacity(cfg.levels);
    let mut prev = None;
    for e in (0..cfg.levels).rev() {
        let out = flow_block(cfg, p, g, e, feats[e], prev)?;
        prev = Some(Carried { state: out.state });
        pyramid.push(out);
    }
    let last = pyramid.last().expect("at least one level").state;
    let (phi, svf) = match cfg.parameterization {
        Parameterization::Svf => (g.exp(last, cfg.exp_steps)?, Some(last)),
        Parameterization::Displacement => (last, None),
    };
    Ok(ForwardOutput { phi, svf, pyramid })
}

/// Result of running a model outside training.
#[derive(Clone, Debug)]
pub struct Registration {
    pub phi: VectorField,
    pub svf: Option<VectorField>,
}

impl Model {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        Ok(Self { params: init_parameters(&config, seed)?, config })
    }

    pub fn register(&self, f0: &ScalarVolume, f1: &ScalarVolume) -> Result<Registration> {
        f0.geometry().ensure_same(f1.geometry())?;
        let geometry = *f0.geometry();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (a, b) = (g.constant(Tensor::from_volume(f0)), g.constant(Tensor::from_volume(f1)));
        let out = forward_graph(&self.config, &p, &mut g, a, b)?;
        let phi = g.value(out.phi).to_field(geometry, FieldKind::Displacement)?;
        if phi.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        let svf = out.svf.map(|v| g.value(v).to_field(geometry, FieldKind::Velocity)).transpose()?;
        Ok(Registration { phi, svf })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, encode_checkpoint(self)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        decode_checkpoint(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `SVCK`, version, config as `key=value` lines, then per parameter: name,
/// shape and a little-endian f32 payload.
pub fn encode_checkpoint(m: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg: String = m.config.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(m.params.len() as u32).to_le_bytes());
    for (name, t) in m.params.names().iter().zip(m.params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.b.len() - self.at < n {
            return Err(Error::Format {
                format: "SVCK",
                offset: self.at,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn err(&self, detail: String) -> Error {
        Error::Format { format: "SVCK", offset: self.at, detail }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { b: bytes, at: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format { format: "SVCK", offset: 0, detail: "bad magic".into() });
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(c.err(format!("unsupported version {version}")));
    }
    let n = c.u32("config length")? as usize;
    let text = std::str::from_utf8(c.take(n, "config")?).map_err(|_| c.err("config is not UTF-8".into()))?;
    let mut config = NetConfig::default();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| c.err(format!("bad config line '{line}'")))?;
        if !config.set(k, v)? {
            return Err(c.err(format!("unknown config key '{k}'")));
        }
    }
    config.validate()?;
    let count = c.u32("parameter count")? as usize;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| c.err("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(c.err(format!("bad rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| c.u32("shape").map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        params.push(name, Tensor::new(shape, data)?);
    }
    if c.at != bytes.len() {
        return Err(c.err("trailing bytes".into()));
    }
    let expected = init_parameters(&config, 0)?;
    if expected.names() != params.names()
        || expected.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::Config("checkpoint parameters do not match its configuration".into()));
    }
    Ok(Model { config, params })
}

/// Writes a checkpoint to any sink.
pub fn write_checkpoint(m: &Model, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(&encode_checkpoint(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::insilico::phantom;

    fn images(n: usize) -> (ScalarVolume, ScalarVolume) {
        let g = GridGeometry::cube(n).unwrap();
        let a = phantom(g, 1);
        let b = crate::grid::warp(&a, &VectorField::constant(g, FieldKind::Displacement, [0.6, -0.4, 0.3])).unwrap();
        (a, b)
    }

    fn small(mut cfg: NetConfig) -> NetConfig {
        cfg.base_channels = 2;
        cfg
    }

    fn all_presets() -> Vec<&'static str> {
        vec![
            "unet",
            "flowunet-none-addition",
            "flowunet-pre-addition",
            "flowunet-post-addition",
            "flowunet-none-composition",
            "flowunet-pre-composition",
            "flowunet-post-composition",
            "svf_sum",
            "svf_bchd",
        ]
    }

    #[test]
    fn presets_round_trip_names() {
        for name in all_presets() {
            let c = NetConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(c.name(), name);
        }
        assert_eq!(NetConfig::preset("flowunet-pre").unwrap(), NetConfig::preset("flowunet-pre-addition").unwrap());
        assert!(NetConfig::preset("flowunet-sideways").is_err());
        assert!(NetConfig::preset("resnet").is_err());
    }

    #[test]
    fn inconsistent_config_is_rejected() {
        let mut c = NetConfig::svf(Propagation::SvfSum);
        c.propagation = Propagation::Addition;
        assert!(c.validate().is_err());
        let mut c = NetConfig::flow_unet(Placement::Pre, Propagation::Addition);
        c.propagation = Propagation::SvfBchd;
        assert!(c.validate().is_err());
        assert!(Model::new(c, 0).is_err());
    }

    #[test]
    fn indivisible_dims_report_padding() {
        let c = NetConfig::default();
        let err = c.check_input(&GridGeometry::with_dims([30, 32, 32]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("[32, 32, 32]"), "{err}");
        c.check_input(&GridGeometry::cube(32).unwrap()).unwrap();
    }

    #[test]
    fn feature_shapes_follow_config() {
        let cfg = NetConfig::default();
        let params = init_parameters(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.constant(Tensor::zeros(vec![1, 32, 32, 32]));
        let feats = encode_dual_stream(&cfg, &p, &mut g, x, x).unwrap();
        let shapes: Vec<Vec<usize>> = feats.iter().map(|(a, _)| g.value(*a).shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 32, 32, 32], vec![16, 16, 16, 16], vec![32, 8, 8, 8]]);
        for (a, b) in feats {
            assert_eq!(g.value(a), g.value(b));
        }
    }

    #[test]
    fn zero_flow_init_is_identity_for_every_variant() {
        let (f0, f1) = images(8);
        for name in all_presets() {
            let mut cfg = small(NetConfig::preset(name).unwrap());
            cfg.levels = 2;
            let m = Model::new(cfg, 3).unwrap();
            let r = m.register(&f0, &f1).unwrap();
            assert!(r.phi.data().iter().all(|&v| v == 0.0), "{name}");
            assert_eq!(crate::grid::warp(&f1, &r.phi).unwrap(), f1);
        }
    }

    #[test]
    fn unet_output_shape() {
        let (f0, f1) = images(32);
        let mut cfg = small(NetConfig::unet());
        cfg.base_channels = 1;
        let r = Model::new(cfg, 0).unwrap().register(&f0, &f1).unwrap();
        assert_eq!(r.phi.geometry().dims(), [32, 32, 32]);
        assert!(r.svf.is_none());
    }

    fn randomize_flow(m: &mut Model, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in m.params.names.iter().zip(m.params.tensors.iter_mut()) {
            if name.contains(".c2.") || name.starts_with("flow.") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-amp..amp));
            }
        }
    }

    #[test]
    fn bchd_order_one_equals_summation() {
        let (f0, f1) = images(12);
        let mut a = Model::new(small(NetConfig::svf(Propagation::SvfSum)), 5).unwrap();
        randomize_flow(&mut a, 1, 0.05);
        let mut b = a.clone();
        b.config.propagation = Propagation::SvfBchd;
        b.config.bchd = BchdConfig::new(1).unwrap();
        let (ra, rb) = (a.register(&f0, &f1).unwrap(), b.register(&f0, &f1).unwrap());
        assert_eq!(ra.phi.data(), rb.phi.data());
        assert!(ra.phi.max_abs() > 0.0);
    }

    #[test]
    fn coarse_only_flow_is_upsampled_chain() {
        let (f0, f1) = images(12);
        for prop in [Propagation::SvfSum, Propagation::SvfBchd] {
            let mut m = Model::new(small(NetConfig::svf(prop)), 5).unwrap();
            let coarse = m.config.levels - 1;
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for v in m.params.get_mut(&format!("flow{coarse}.c2.w")).unwrap().data_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
            let mut g = Graph::new();
            let p = m.params.bind(&mut g);
            let (a, b) = (g.constant(Tensor::from_volume(&f0)), g.constant(Tensor::from_volume(&f1)));
            let out = forward_graph(&m.config, &p, &mut g, a, b).unwrap();
            let mut v = out.pyramid[0].residual;
            for _ in 0..coarse {
                v = g.upsample2(v, 2.0).unwrap();
            }
            let direct = g.exp(v, m.config.exp_steps).unwrap();
            assert_eq!(g.value(out.phi), g.value(direct), "{prop}");
        }
    }

    #[test]
    fn single_level_svf_matches_manual_chain() {
        let (f0, f1) = images(6);
        let mut cfg = small(NetConfig::svf(Propagation::SvfBchd));
        cfg.levels = 1;
        let mut m = Model::new(cfg, 2).unwrap();
        randomize_flow(&mut m, 4, 0.1);
        let r = m.register(&f0, &f1).unwrap();
        let mut g = Graph::new();
        let pv: Vec<Var> = m.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let i = |n: &str| pv[m.params.index_of(n).unwrap()];
        let (a, b) = (g.constant(Tensor::from_volume(&f0)), g.constant(Tensor::from_volume(&f1)));
        let mut s = [a, b];
        for x in s.iter_mut() {
            let e = g.conv3d(*x, i("enc0.w"), i("enc0.b"), 1).unwrap();
            let e = g.leaky_relu(e, 0.2);
            let d = g.conv3d(e, i("dec0.w"), i("dec0.b"), 1).unwrap();
            *x = g.leaky_relu(d, 0.2);
        }
        let h = g.hadamard(s[0], s[1]).unwrap();
        let h = g.conv3d(h, i("flow0.c1.w"), i("flow0.c1.b"), 1).unwrap();
        let h = g.leaky_relu(h, 0.2);
        let v = g.conv3d(h, i("flow0.c2.w"), i("flow0.c2.b"), 1).unwrap();
        let phi = crate::svf::exponentiate(&g.value(v).to_field(*f0.geometry(), FieldKind::Velocity).unwrap(), 0).unwrap();
        assert_eq!(r.phi.data(), phi.data());
        assert!(r.phi.max_abs() > 0.0);
    }

    #[test]
    fn zero_encoder_propagates_biases() {
        let cfg = small(NetConfig::default());
        let mut params = init_parameters(&cfg, 1).unwrap();
        for (name, t) in params.names.clone().iter().zip(params.tensors.iter_mut()) {
            if name.starts_with("enc") && name.ends_with(".w") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.constant(Tensor::from_volume(&images(12).0));
        let feats = encode(&cfg, &p, &mut g, x).unwrap();
        for (e, f) in feats.iter().enumerate() {
            let b = params.get(&format!("enc{e}.b")).unwrap().data();
            let t = g.value(*f);
            for c in 0..t.channels() {
                let expect = if b[c] >= 0.0 { b[c] } else { 0.2 * b[c] };
                assert!(t.data()[c * t.voxels()..(c + 1) * t.voxels()].iter().all(|&v| v == expect));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_stable() {
        let mut m = Model::new(small(NetConfig::flow_unet(Placement::Post, Propagation::Composition)), 11).unwrap();
        randomize_flow(&mut m, 2, 0.3);
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
