//! The reconstruction network.
//!
//! * Main branch: an asymmetric U-Net over the front RGB image and its
//!   Plücker rays (9 channels) produces the low-resolution feature map `F_l`.
//! * Guidance branch: one shared auxiliary U-Net runs over the four prior
//!   normal maps with their rays, giving `F_n` (front, back, left, right).
//!   Each view's `F_n` is upsampled bilinearly, added to `F_l` and mapped by
//!   a per-view convolution to a 14-channel Gaussian map; the four activated
//!   maps are concatenated into `Θ`.
//! * Constraint head: separate per-view convolutions over the same residual
//!   sums for the non-front views produce direction-feature Gaussians `Θ′`.
//!
//! Encoder stages use the channel multipliers with stride-2 convolutions in
//! between; the decoder climbs back only to the output level, with skip
//! connections, two residual blocks per stage and group norm + SiLU.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Real, Tape, Tensor, Var};
use crate::camera::RayMap;
use crate::error::{Error, Result};
use crate::gaussian::{activate_on_tape, ActivationParams, FeatureKind, OPACITY, RECORD_LEN, ROT};
use crate::image::Image;
use crate::mesh::NormalMap;

pub const VIEW_NAMES: [&str; 4] = ["front", "back", "left", "right"];
pub const IN_CHANNELS: usize = 9;
const GN_EPS: f64 = 1e-5;

/// Normal-map guidance ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnmgMode {
    Off,
    FrontOnly,
    FourView,
}

/// Normal-map constraint ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnmcMode {
    Off,
    ThreeView,
    FourView,
}

impl SnmcMode {
    /// Views (indices into front, back, left, right) supervised by the head.
    pub fn views(self) -> &'static [usize] {
        match self {
            SnmcMode::Off => &[],
            SnmcMode::ThreeView => &[1, 2, 3],
            SnmcMode::FourView => &[0, 1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Side of the square RGB input.
    pub resolution: usize,
    pub base_width: usize,
    pub multipliers: Vec<usize>,
    /// Input side divided by output map side: 2 or 4.
    pub output_ratio: usize,
    pub groups: usize,
    pub blocks: usize,
    /// Channels of `F_l` and `F_n`.
    pub hidden: usize,
    /// Head weights are drawn with std `head_gain / sqrt(fan_in)`.
    pub head_gain: f64,
    /// Half-extent of the scene box.
    pub bounds: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            base_width: 32,
            multipliers: vec![1, 2, 4],
            output_ratio: 2,
            groups: 8,
            blocks: 2,
            hidden: 64,
            head_gain: 0.5,
            bounds: 1.0,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.multipliers.len();
        if stages < 2 {
            return Err(Error::config("need at least two encoder stages"));
        }
        if self.resolution == 0 || self.resolution % (1 << stages) != 0 {
            return Err(Error::config(format!(
                "resolution {} must be divisible by 2^{stages}",
                self.resolution
            )));
        }
        if !matches!(self.output_ratio, 2 | 4) || self.output_level() >= stages {
            return Err(Error::config(format!(
                "output ratio 1/{} must be 1/2 or 1/4 and reachable by the encoder",
                self.output_ratio
            )));
        }
        let widths = self.multipliers.iter().map(|m| m * self.base_width).chain([self.hidden]);
        for w in widths {
            if w == 0 || self.groups == 0 || w % self.groups != 0 {
                return Err(Error::config(format!("{} groups do not divide width {w}", self.groups)));
            }
        }
        Ok(())
    }

    fn output_level(&self) -> usize {
        self.output_ratio.trailing_zeros() as usize
    }

    /// Side of each per-view Gaussian map.
    pub fn map_size(&self) -> usize {
        self.resolution / self.output_ratio
    }

    /// Side of the prior normal maps (half the input).
    pub fn normal_size(&self) -> usize {
        self.resolution / 2
    }

    pub fn activation(&self) -> ActivationParams {
        ActivationParams::for_map(self.bounds, self.map_size() * self.map_size())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * self.multipliers[level]
    }
}

#[derive(Clone, Copy)]
enum Init {
    /// Fan-in scaled normal with the given gain.
    Normal(f64),
    Const(f32),
    /// Head bias preset.
    HeadBias,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_spec(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, gain: f64) {
    out.push(ParamSpec { name: format!("{name}.weight"), shape: vec![cout, cin, 3, 3], init: Init::Normal(gain) });
    out.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cout], init: Init::Const(0.0) });
}

fn norm_spec(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(ParamSpec { name: format!("{name}.gain"), shape: vec![c], init: Init::Const(1.0) });
    out.push(ParamSpec { name: format!("{name}.shift"), shape: vec![c], init: Init::Const(0.0) });
}

fn resblock_spec(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    let kaiming = std::f64::consts::SQRT_2;
    norm_spec(out, &format!("{name}.norm1"), c);
    conv_spec(out, &format!("{name}.conv1"), c, c, kaiming);
    norm_spec(out, &format!("{name}.norm2"), c);
    conv_spec(out, &format!("{name}.conv2"), c, c, kaiming);
}

fn unet_spec(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &NetConfig, out_level: usize) {
    let kaiming = std::f64::consts::SQRT_2;
    let stages = cfg.multipliers.len();
    conv_spec(out, &format!("{prefix}.stem"), IN_CHANNELS, cfg.width(0), kaiming);
    for l in 0..stages {
        if l > 0 {
            conv_spec(out, &format!("{prefix}.down{l}"), cfg.width(l - 1), cfg.width(l), kaiming);
        }
        for b in 0..cfg.blocks {
            resblock_spec(out, &format!("{prefix}.enc{l}.{b}"), cfg.width(l));
        }
    }
    for l in (out_level..stages - 1).rev() {
        conv_spec(out, &format!("{prefix}.up{l}.fuse"), cfg.width(l + 1) + cfg.width(l), cfg.width(l), kaiming);
        for b in 0..cfg.blocks {
            resblock_spec(out, &format!("{prefix}.dec{l}.{b}"), cfg.width(l));
        }
    }
    norm_spec(out, &format!("{prefix}.out.norm"), cfg.width(out_level));
    conv_spec(out, &format!("{prefix}.out.conv"), cfg.width(out_level), cfg.hidden, 1.0);
}

/// Level at which the auxiliary U-Net stops; its output is upsampled to `F_l`.
const AUX_OUT_LEVEL: usize = 1;

fn model_spec(cfg: &NetConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    unet_spec(&mut out, "main", cfg, cfg.output_level());
    unet_spec(&mut out, "aux", cfg, AUX_OUT_LEVEL);
    for head in ["guide", "snmc"] {
        for v in VIEW_NAMES {
            out.push(ParamSpec {
                name: format!("{head}.{v}.weight"),
                shape: vec![RECORD_LEN, cfg.hidden, 3, 3],
                init: Init::Normal(cfg.head_gain),
            });
            out.push(ParamSpec { name: format!("{head}.{v}.bias"), shape: vec![RECORD_LEN], init: Init::HeadBias });
        }
    }
    out
}

/// Raw head bias: identity rotation, opacity 0.1, unit base scale, centred
/// positions and mid-gray colours.
pub fn head_bias() -> [f32; RECORD_LEN] {
    let mut b = [0.0f32; RECORD_LEN];
    b[ROT] = 1.0;
    b[OPACITY] = (0.1f64 / 0.9).ln() as f32;
    b
}

/// Named parameter arrays plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: NetConfig,
    pub params: BTreeMap<String, Tensor<f32>>,
}

pub type ParamVars = BTreeMap<String, Var>;

pub fn init_weights(config: &NetConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for spec in model_spec(config) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.init {
            Init::Const(v) => vec![v; n],
            Init::HeadBias => head_bias().to_vec(),
            Init::Normal(gain) => {
                let fan_in: usize = spec.shape[1..].iter().product();
                let std = gain / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * std) as f32
                    })
                    .collect()
            }
        };
        params.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(ModelWeights { config: config.clone(), params })
}

impl ModelWeights {
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Registers every parameter as a leaf.
    pub fn register<T: Real>(&self, tape: &mut Tape<T>) -> ParamVars {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.cast())))
            .collect()
    }

    /// Checks that names and shapes match what `config` would create.
    pub fn check_layout(&self) -> Result<()> {
        let spec = model_spec(&self.config);
        if spec.len() != self.params.len() {
            return Err(Error::config(format!(
                "expected {} parameter arrays, found {}",
                spec.len(),
                self.params.len()
            )));
        }
        for s in spec {
            match self.params.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::config(format!("{}: shape {:?}, expected {:?}", s.name, t.shape(), s.shape)))
                }
                None => return Err(Error::config(format!("missing parameter {}", s.name))),
            }
        }
        Ok(())
    }

    /// Gradient for every parameter, zero where the loss did not reach it.
    pub fn collect_grads<T: Real>(&self, vars: &ParamVars, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<f32>> {
        self.params
            .iter()
            .map(|(k, t)| {
                let g = grads
                    .take(vars[k])
                    .map(|g| g.cast::<f32>())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

fn p(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::config(format!("missing parameter {name}")))
}

fn conv<T: Real>(tape: &mut Tape<T>, vars: &ParamVars, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p(vars, &format!("{name}.weight"))?;
    let b = p(vars, &format!("{name}.bias"))?;
    tape.conv2d(x, w, b, stride, 1)
}

fn norm_act<T: Real>(tape: &mut Tape<T>, vars: &ParamVars, name: &str, x: Var, groups: usize) -> Result<Var> {
    let g = p(vars, &format!("{name}.gain"))?;
    let s = p(vars, &format!("{name}.shift"))?;
    let y = tape.group_norm(x, groups, g, s, T::lit(GN_EPS))?;
    Ok(tape.silu(y))
}

fn resblock<T: Real>(tape: &mut Tape<T>, vars: &ParamVars, name: &str, x: Var, groups: usize) -> Result<Var> {
    let h = norm_act(tape, vars, &format!("{name}.norm1"), x, groups)?;
    let h = conv(tape, vars, &format!("{name}.conv1"), h, 1)?;
    let h = norm_act(tape, vars, &format!("{name}.norm2"), h, groups)?;
    let h = conv(tape, vars, &format!("{name}.conv2"), h, 1)?;
    tape.add(x, h)
}

fn unet<T: Real>(tape: &mut Tape<T>, vars: &ParamVars, cfg: &NetConfig, prefix: &str, input: Var, out_level: usize) -> Result<Var> {
    let stages = cfg.multipliers.len();
    let g = cfg.groups;
    let mut x = conv(tape, vars, &format!("{prefix}.stem"), input, 1)?;
    let mut skips = Vec::with_capacity(stages);
    for l in 0..stages {
        if l > 0 {
            x = conv(tape, vars, &format!("{prefix}.down{l}"), x, 2)?;
        }
        for b in 0..cfg.blocks {
            x = resblock(tape, vars, &format!("{prefix}.enc{l}.{b}"), x, g)?;
        }
        skips.push(x);
    }
    for l in (out_level..stages - 1).rev() {
        let [_, _, h, w] = tape.value(skips[l]).dims4()?;
        let up = tape.bilinear_resize(x, h, w)?;
        let cat = tape.concat_channels(&[up, skips[l]])?;
        x = conv(tape, vars, &format!("{prefix}.up{l}.fuse"), cat, 1)?;
        for b in 0..cfg.blocks {
            x = resblock(tape, vars, &format!("{prefix}.dec{l}.{b}"), x, g)?;
        }
    }
    let x = norm_act(tape, vars, &format!("{prefix}.out.norm"), x, g)?;
    conv(tape, vars, &format!("{prefix}.out.conv"), x, 1)
}

fn rays_tensor<T: Real>(rays: &RayMap) -> Result<Tensor<T>> {
    let e = rays.embedding();
    Tensor::new(vec![1, 6, rays.height, rays.width], e.into_iter().map(T::lit).collect())
}

fn image_tensor<T: Real>(img: &Image) -> Result<Tensor<T>> {
    Tensor::new(
        vec![1, img.channels, img.height, img.width],
        img.data.iter().map(|&v| T::lit(v as f64)).collect(),
    )
}

/// `F_l` from the front image (`3×H×W`) and its rays.
pub fn shgm_forward<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &NetConfig,
    image: &Image,
    rays: &RayMap,
) -> Result<Var> {
    let r = cfg.resolution;
    if image.channels != 3 || image.height != r || image.width != r || rays.height != r || rays.width != r {
        return Err(Error::config(format!(
            "network expects a 3x{r}x{r} image with matching rays, got {}x{}x{} and {}x{} rays",
            image.channels, image.height, image.width, rays.height, rays.width
        )));
    }
    let img = tape.constant(image_tensor(image)?);
    let ray = tape.constant(rays_tensor(rays)?);
    let x = tape.concat_channels(&[img, ray])?;
    unet(tape, vars, cfg, "main", x, cfg.output_level())
}

/// `F_n` for the four views, stacked along the batch axis `[4, hidden, h, w]`.
pub fn snmg_forward<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &NetConfig,
    maps: &[NormalMap],
    rays: &[RayMap],
) -> Result<Var> {
    let n = cfg.normal_size();
    if maps.len() != 4 || rays.len() != 4 {
        return Err(Error::usage(format!("guidance needs 4 normal maps and 4 ray maps, got {} and {}", maps.len(), rays.len())));
    }
    let mut data = Vec::with_capacity(4 * IN_CHANNELS * n * n);
    for (m, r) in maps.iter().zip(rays) {
        let ok = m.normals.channels == 3 && m.normals.height == n && m.normals.width == n && r.height == n && r.width == n;
        if !ok {
            return Err(Error::config(format!(
                "normal maps must be 3x{n}x{n} with matching rays, got {}x{}x{}",
                m.normals.channels, m.normals.height, m.normals.width
            )));
        }
        data.extend(m.normals.data.iter().map(|&v| T::lit(v as f64)));
        data.extend(r.embedding().into_iter().map(T::lit));
    }
    let x = tape.constant(Tensor::new(vec![4, IN_CHANNELS, n, n], data)?);
    unet(tape, vars, cfg, "aux", x, AUX_OUT_LEVEL)
}

/// `conv_v(F_l + up(F_nv))` for view `v`; without `F_nv` just `conv_v(F_l)`.
fn view_map<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    head: &str,
    v: usize,
    f_l: Var,
    f_n: Option<Var>,
) -> Result<Var> {
    let [_, _, h, w] = tape.value(f_l).dims4()?;
    let x = match f_n {
        Some(f_n) => {
            let one = tape.slice(f_n, 0, v, 1)?;
            let up = tape.bilinear_resize(one, h, w)?;
            tape.add(f_l, up)?
        }
        None => f_l,
    };
    conv(tape, vars, &format!("{head}.{}", VIEW_NAMES[v]), x, 1)
}

/// Which guidance views receive their `F_n` term.
fn guided(mode: SnmgMode, v: usize) -> bool {
    match mode {
        SnmgMode::Off => false,
        SnmgMode::FrontOnly => v == 0,
        SnmgMode::FourView => true,
    }
}

/// `Θ` as activated records `[4·h·w, 14]` in front, back, left, right order.
pub fn guide_and_fuse<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &NetConfig,
    f_l: Var,
    f_n: Option<Var>,
    mode: SnmgMode,
) -> Result<Var> {
    let params = cfg.activation();
    let mut parts = Vec::with_capacity(4);
    for v in 0..4 {
        let fn_v = if guided(mode, v) { f_n } else { None };
        let raw = view_map(tape, vars, "guide", v, f_l, fn_v)?;
        parts.push(activate_on_tape(tape, raw, FeatureKind::Color, params)?);
    }
    tape.concat(&parts, 0)
}

/// `Θ′` as activated direction records `[|views|·h·w, 14]`.
pub fn snmc_head<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &NetConfig,
    f_l: Var,
    f_n: Option<Var>,
    views: &[usize],
) -> Result<Var> {
    if views.is_empty() {
        return Err(Error::usage("constraint head needs at least one view"));
    }
    let params = cfg.activation();
    let mut parts = Vec::with_capacity(views.len());
    for &v in views {
        let raw = view_map(tape, vars, "snmc", v, f_l, f_n)?;
        parts.push(activate_on_tape(tape, raw, FeatureKind::Direction, params)?);
    }
    tape.concat(&parts, 0)
}

/// Network inputs for one scene.
pub struct NetInputs<'a> {
    pub image: &'a Image,
    pub rays: &'a RayMap,
    /// Front, back, left, right prior normal maps at half resolution.
    pub normal_maps: &'a [NormalMap],
    pub normal_rays: &'a [RayMap],
}

#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    pub theta: Var,
    pub theta_prime: Option<Var>,
    pub f_l: Var,
    pub f_n: Option<Var>,
}

pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &NetConfig,
    inputs: &NetInputs<'_>,
    snmg: SnmgMode,
    snmc: SnmcMode,
) -> Result<NetOutput> {
    let f_l = shgm_forward(tape, vars, cfg, inputs.image, inputs.rays)?;
    let need_aux = snmg != SnmgMode::Off || snmc != SnmcMode::Off;
    let f_n = if need_aux {
        Some(snmg_forward(tape, vars, cfg, inputs.normal_maps, inputs.normal_rays)?)
    } else {
        None
    };
    let theta = guide_and_fuse(tape, vars, cfg, f_l, f_n, snmg)?;
    let theta_prime = match snmc {
        SnmcMode::Off => None,
        mode => Some(snmc_head(tape, vars, cfg, f_l, f_n, mode.views())?),
    };
    Ok(NetOutput { theta, theta_prime, f_l, f_n })
}

#[cfg(test)]
mod tests;
