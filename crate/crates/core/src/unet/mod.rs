//! Configurable 3D encoder-decoder with optional FiLM sites.

mod checkpoint;
mod inference;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use inference::{predict_mask, sliding_window_probabilities, window_starts, InferenceConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::film::{self, FilmGeneratorParams, GeneratorVars, TimeVector};
use crate::tensor::{Real, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::{Error, Result};

pub const NORM_EPSILON: f32 = 1e-5;

/// Where FiLM layers are inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    None,
    Encoder,
    Decoder,
    Bottleneck,
    All,
}

impl Placement {
    pub const VARIANTS: [Placement; 5] = [
        Placement::None,
        Placement::Encoder,
        Placement::Decoder,
        Placement::Bottleneck,
        Placement::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placement::None => "none",
            Placement::Encoder => "encoder",
            Placement::Decoder => "decoder",
            Placement::Bottleneck => "bottleneck",
            Placement::All => "all",
        }
    }

    pub fn includes(self, site: FilmSite) -> bool {
        matches!(
            (self, site),
            (Placement::All, _)
                | (Placement::Encoder, FilmSite::Encoder(_))
                | (Placement::Decoder, FilmSite::Decoder(_))
                | (Placement::Bottleneck, FilmSite::Bottleneck)
        )
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Placement::VARIANTS
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown placement {s:?}; expected one of none|encoder|decoder|bottleneck|all")))
    }
}

/// A stage output that can be modulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilmSite {
    Encoder(usize),
    Bottleneck,
    Decoder(usize),
}

impl fmt::Display for FilmSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilmSite::Encoder(i) => write!(f, "enc{i}"),
            FilmSite::Bottleneck => f.write_str("bottleneck"),
            FilmSite::Decoder(i) => write!(f, "dec{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub placement: Placement,
    pub seed: u64,
    pub film_hidden: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 2,
            stage_channels: vec![8, 16, 32],
            bottleneck_channels: 64,
            placement: Placement::None,
            seed: 0,
            film_hidden: film::DEFAULT_HIDDEN,
        }
    }
}

impl ArchitectureConfig {
    pub fn depth(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 3 {
            return Err(Error::Config(format!("in_channels must be 3 (phase triplet), got {}", self.in_channels)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.depth() < 2 {
            return Err(Error::Config(format!("depth must be at least 2, got {}", self.depth())));
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stage_channels must be positive and strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        if self.bottleneck_channels == 0 || self.film_hidden == 0 {
            return Err(Error::Config("bottleneck_channels and film_hidden must be positive".into()));
        }
        Ok(())
    }

    /// All candidate sites in forward order.
    pub fn all_sites(&self) -> Vec<FilmSite> {
        let d = self.depth();
        (0..d)
            .map(FilmSite::Encoder)
            .chain(std::iter::once(FilmSite::Bottleneck))
            .chain((0..d).rev().map(FilmSite::Decoder))
            .collect()
    }

    pub fn active_sites(&self) -> Vec<FilmSite> {
        self.all_sites().into_iter().filter(|s| self.placement.includes(*s)).collect()
    }

    /// Channel count of the feature map at a site.
    pub fn site_channels(&self, site: FilmSite) -> usize {
        match site {
            FilmSite::Encoder(i) | FilmSite::Decoder(i) => self.stage_channels[i],
            FilmSite::Bottleneck => self.bottleneck_channels,
        }
    }

    /// Required divisor of every spatial input dimension.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.depth()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He { fan_in: usize },
    Zeros,
    Ones,
}

/// Parameter names, shapes and initializers of the backbone in forward order.
fn backbone_layout(cfg: &ArchitectureConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let conv_block = |out: &mut Vec<_>, name: String, cin: usize, cout: usize, k: usize| {
        let fan_in = cin * k * k * k;
        out.push((format!("{name}.weight"), vec![cout, cin, k, k, k], Init::He { fan_in }));
        out.push((format!("{name}.bias"), vec![cout], Init::Zeros));
        out.push((format!("{name}.norm.gain"), vec![cout], Init::Ones));
        out.push((format!("{name}.norm.shift"), vec![cout], Init::Zeros));
    };
    let ch = &cfg.stage_channels;
    let d = cfg.depth();
    let mut cin = cfg.in_channels;
    for i in 0..d {
        conv_block(&mut out, format!("enc{i}.conv0"), cin, ch[i], 3);
        conv_block(&mut out, format!("enc{i}.conv1"), ch[i], ch[i], 3);
        let next = if i + 1 < d { ch[i + 1] } else { cfg.bottleneck_channels };
        conv_block(&mut out, format!("enc{i}.down"), ch[i], next, 2);
        cin = next;
    }
    conv_block(&mut out, "bottleneck.conv0".into(), cin, cfg.bottleneck_channels, 3);
    conv_block(&mut out, "bottleneck.conv1".into(), cfg.bottleneck_channels, cfg.bottleneck_channels, 3);
    let mut below = cfg.bottleneck_channels;
    for i in (0..d).rev() {
        out.push((format!("dec{i}.up.weight"), vec![below, ch[i], 2, 2, 2], Init::He { fan_in: below }));
        out.push((format!("dec{i}.up.bias"), vec![ch[i]], Init::Zeros));
        conv_block(&mut out, format!("dec{i}.conv0"), 2 * ch[i], ch[i], 3);
        conv_block(&mut out, format!("dec{i}.conv1"), ch[i], ch[i], 3);
        below = ch[i];
    }
    out.push(("head.weight".into(), vec![cfg.num_classes, ch[0], 1, 1, 1], Init::He { fan_in: ch[0] }));
    out.push(("head.bias".into(), vec![cfg.num_classes], Init::Zeros));
    out
}

fn film_param_names(site: FilmSite) -> [String; 4] {
    ["w1", "b1", "w2", "b2"].map(|p| format!("film.{site}.{p}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// Learnable parameters of a configured backbone plus one generator per active FiLM site.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ArchitectureConfig,
    params: Vec<NamedParam>,
    index: BTreeMap<String, usize>,
}

/// Deterministic initialization from `config.seed`.
///
/// The backbone draws from its own stream, so models that differ only in placement share
/// bit-identical backbone weights.
pub fn build_model(config: &ArchitectureConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Vec::new();
    for (name, shape, init) in backbone_layout(config) {
        let tensor = match init {
            Init::He { fan_in } => {
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
                Tensor::from_fn(shape, |_| normal.sample(&mut rng))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
        };
        params.push(NamedParam { name, tensor });
    }
    let mut film_rng = ChaCha8Rng::seed_from_u64(config.seed);
    film_rng.set_stream(1);
    for site in config.active_sites() {
        let gen = FilmGeneratorParams::new(config.site_channels(site), config.film_hidden, &mut film_rng);
        for (name, tensor) in film_param_names(site).into_iter().zip([gen.w1, gen.b1, gen.w2, gen.b2]) {
            params.push(NamedParam { name, tensor });
        }
    }
    ModelParams::from_parts(config.clone(), params)
}

impl ModelParams {
    /// Assemble from named tensors, checking names and shapes against the architecture.
    pub fn from_parts(config: ArchitectureConfig, params: Vec<NamedParam>) -> Result<Self> {
        config.validate()?;
        let mut expected: Vec<(String, Vec<usize>)> =
            backbone_layout(&config).into_iter().map(|(n, s, _)| (n, s)).collect();
        for site in config.active_sites() {
            let (c, h) = (config.site_channels(site), config.film_hidden);
            let shapes = [vec![h, 3], vec![h], vec![2 * c, h], vec![2 * c]];
            expected.extend(film_param_names(site).into_iter().zip(shapes));
        }
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected {name} {shape:?}, got {} {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Self { config, params, index })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    pub fn film_sites(&self) -> Vec<FilmSite> {
        self.config.active_sites()
    }

    pub fn film_generator(&self, site: FilmSite) -> Option<FilmGeneratorParams> {
        let [w1, b1, w2, b2] = film_param_names(site).map(|n| self.param(&n).cloned());
        Some(FilmGeneratorParams {
            w1: w1?,
            b1: b1?,
            w2: w2?,
            b2: b2?,
        })
    }

    pub fn film_generators(&self) -> BTreeMap<FilmSite, FilmGeneratorParams> {
        self.film_sites()
            .into_iter()
            .filter_map(|s| self.film_generator(s).map(|g| (s, g)))
            .collect()
    }

    /// Record every parameter as a tape leaf, in parameter order.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.cast::<T>().with_requires_grad(requires_grad)))
            .collect()
    }

    /// Check an `N x 3 x D x H x W` input against the architecture.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::Config(format!(
                "input must be N x {} x D x H x W, got {shape:?}",
                self.config.in_channels
            )));
        }
        let div = self.config.spatial_divisor();
        if let Some((axis, &size)) = shape[2..].iter().enumerate().find(|(_, &s)| s % div != 0) {
            return Err(Error::Config(format!(
                "spatial size {size} along {} must be divisible by 2^depth = {div}",
                ["depth", "height", "width"][axis]
            )));
        }
        Ok(())
    }

    /// Logits `[N, num_classes, D, H, W]` recorded on `tape` using parameters bound by [`bind`](Self::bind).
    pub fn forward_on_tape<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], input: Var, times: &[TimeVector]) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        self.check_input(&shape)?;
        let n = shape[0];
        let times: Vec<TimeVector> = match times.len() {
            1 => vec![times[0]; n],
            len if len == n => times.to_vec(),
            len => return Err(Error::InvalidTimes(format!("{len} time vectors for a batch of {n}"))),
        };
        for t in &times {
            t.validate()?;
        }
        let p = |name: &str| vars[self.index[name]];
        let block = |tape: &mut Tape<T>, x: Var, name: &str, stride: usize, pad: usize| -> Result<Var> {
            let y = tape.conv3d(x, p(&format!("{name}.weight")), p(&format!("{name}.bias")), [stride; 3], [pad; 3])?;
            let y = tape.instance_norm(
                y,
                p(&format!("{name}.norm.gain")),
                p(&format!("{name}.norm.shift")),
                NORM_EPSILON,
            )?;
            Ok(tape.leaky_relu(y, DEFAULT_LEAKY_SLOPE))
        };
        let film_at = |tape: &mut Tape<T>, x: Var, site: FilmSite| -> Result<Var> {
            if !self.config.placement.includes(site) {
                return Ok(x);
            }
            let [w1, b1, w2, b2] = film_param_names(site).map(|n| p(&n));
            let (gamma, beta) = film::generate_on_tape(tape, GeneratorVars { w1, b1, w2, b2 }, &times)?;
            film::modulate_on_tape(tape, x, gamma, beta)
        };

        let depth = self.config.depth();
        let mut x = input;
        let mut skips = Vec::with_capacity(depth);
        for i in 0..depth {
            x = block(tape, x, &format!("enc{i}.conv0"), 1, 1)?;
            x = block(tape, x, &format!("enc{i}.conv1"), 1, 1)?;
            x = film_at(tape, x, FilmSite::Encoder(i))?;
            skips.push(x);
            x = block(tape, x, &format!("enc{i}.down"), 2, 0)?;
        }
        x = block(tape, x, "bottleneck.conv0", 1, 1)?;
        x = block(tape, x, "bottleneck.conv1", 1, 1)?;
        x = film_at(tape, x, FilmSite::Bottleneck)?;
        for i in (0..depth).rev() {
            x = tape.conv_transpose3d(x, p(&format!("dec{i}.up.weight")), p(&format!("dec{i}.up.bias")), [2; 3])?;
            x = tape.concat_channels(skips[i], x)?;
            x = block(tape, x, &format!("dec{i}.conv0"), 1, 1)?;
            x = block(tape, x, &format!("dec{i}.conv1"), 1, 1)?;
            x = film_at(tape, x, FilmSite::Decoder(i))?;
        }
        Ok(tape.conv3d(x, p("head.weight"), p("head.bias"), [1; 3], [0; 3])?)
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, input: &Tensor, times: &[TimeVector]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = self.forward_on_tape(&mut tape, &vars, x, times)?;
        Ok(tape.into_value(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(placement: Placement, seed: u64) -> ArchitectureConfig {
        ArchitectureConfig {
            stage_channels: vec![4, 8],
            bottleneck_channels: 8,
            placement,
            seed,
            ..Default::default()
        }
    }

    fn random_input(shape: [usize; 5], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn site_counts_follow_placement() {
        let mut cfg = ArchitectureConfig::default();
        for (placement, want) in [
            (Placement::None, 0),
            (Placement::Encoder, 3),
            (Placement::Decoder, 3),
            (Placement::Bottleneck, 1),
            (Placement::All, 7),
        ] {
            cfg.placement = placement;
            let m = build_model(&cfg).unwrap();
            assert_eq!(m.film_generators().len(), want, "{placement}");
        }
    }

    #[test]
    fn generator_output_width_is_twice_channels() {
        let cfg = ArchitectureConfig {
            placement: Placement::All,
            ..Default::default()
        };
        let m = build_model(&cfg).unwrap();
        for (site, gen) in m.film_generators() {
            assert_eq!(gen.b2.numel(), 2 * cfg.site_channels(site));
            assert!(gen.w2.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = small(Placement::All, 42);
        assert_eq!(build_model(&cfg).unwrap(), build_model(&cfg).unwrap());
        let other = small(Placement::All, 43);
        assert_ne!(build_model(&cfg).unwrap().params()[0], build_model(&other).unwrap().params()[0]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ArchitectureConfig::default();
        cfg.stage_channels = vec![8];
        assert!(build_model(&cfg).is_err());
        cfg.stage_channels = vec![8, 8, 16];
        assert!(build_model(&cfg).is_err());
        cfg.stage_channels = vec![8, 16];
        cfg.in_channels = 4;
        assert!(build_model(&cfg).is_err());
    }

    #[test]
    fn output_shape_for_depth_two() {
        let m = build_model(&small(Placement::None, 1)).unwrap();
        let y = m.forward(&random_input([1, 3, 16, 16, 16], 2), &[TimeVector::new(0.0, 60.0, 120.0).unwrap()]).unwrap();
        assert_eq!(y.shape(), &[1, 2, 16, 16, 16]);
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let m = build_model(&small(Placement::None, 1)).unwrap();
        let err = m
            .forward(&random_input([1, 3, 8, 10, 8], 2), &[TimeVector::new(0.0, 60.0, 120.0).unwrap()])
            .unwrap_err();
        assert!(err.to_string().contains("divisible by 2^depth = 4"), "{err}");
    }

    #[test]
    fn placement_parses_and_rejects_unknown_names() {
        for p in Placement::VARIANTS {
            assert_eq!(p.name().parse::<Placement>().unwrap(), p);
        }
        assert!("encdec".parse::<Placement>().is_err());
    }

    #[test]
    fn all_equals_none_at_init() {
        let x = random_input([1, 3, 8, 8, 8], 5);
        let t = [TimeVector::new(0.0, 80.0, 250.0).unwrap()];
        let a = build_model(&small(Placement::All, 9)).unwrap().forward(&x, &t).unwrap();
        let b = build_model(&small(Placement::None, 9)).unwrap().forward(&x, &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_sample_times_in_a_batch() {
        let mut m = build_model(&small(Placement::Bottleneck, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for v in m.param_mut("film.bottleneck.w2").unwrap().data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let one = random_input([1, 3, 8, 8, 8], 6);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let two = Tensor::new([2, 3, 8, 8, 8], two).unwrap();
        let (ta, tb) = (TimeVector::new(0.0, 30.0, 60.0).unwrap(), TimeVector::new(0.0, 200.0, 500.0).unwrap());
        let y = m.forward(&two, &[ta, tb]).unwrap();
        let ya = m.forward(&one, &[ta]).unwrap();
        let yb = m.forward(&one, &[tb]).unwrap();
        assert_eq!(y.sample(0).data(), ya.data());
        assert_eq!(y.sample(1).data(), yb.data());
        assert_ne!(ya, yb);
    }
}
