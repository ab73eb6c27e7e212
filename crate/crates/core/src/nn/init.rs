use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::config::{Architecture, EstimatorConfig, ExtractorConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::Result;

/// Which sub-network a parameter belongs to; used as the name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Extractor,
    Decoder,
    Estimator,
    Classifier,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Extractor => "extractor",
            Role::Decoder => "decoder",
            Role::Estimator => "estimator",
            Role::Classifier => "classifier",
        }
    }

    pub fn owns(self, name: &str) -> bool {
        name.strip_prefix(self.prefix())
            .is_some_and(|rest| rest.starts_with('.'))
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Weights are uniform in `+-sqrt(6 / fan_in)`; biases start at zero.
///
/// Each tensor draws from its own stream keyed by the model seed and its
/// name, so adding a head never shifts the initial values of the others.
fn uniform(seed: u64, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    if name.ends_with(".bias") {
        return Ok(Tensor::zeros(&shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
}

struct Builder {
    seed: u64,
    prefix: &'static str,
    store: ParamStore,
}

impl Builder {
    fn new(role: Role, seed: u64) -> Self {
        Builder {
            seed,
            prefix: role.prefix(),
            store: ParamStore::new(),
        }
    }

    fn add(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let full = format!("{}.{name}", self.prefix);
        let t = uniform(self.seed, &full, shape, fan_in)?;
        self.store.insert(full, t)
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<()> {
        self.add(&format!("{name}.weight"), vec![n_in, n_out], n_in)?;
        self.add(&format!("{name}.bias"), vec![n_out], n_in)
    }
}

pub fn init_extractor(cfg: &ExtractorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut b = Builder::new(Role::Extractor, seed);
    let mut ch = cfg.in_channels;
    for (i, l) in cfg.conv.iter().enumerate() {
        let fan_in = ch * l.kernel * l.kernel;
        b.add(
            &format!("conv{i}.weight"),
            vec![l.filters, ch, l.kernel, l.kernel],
            fan_in,
        )?;
        b.add(&format!("conv{i}.bias"), vec![l.filters], fan_in)?;
        ch = l.filters;
    }
    if let Some(sa) = &cfg.sa {
        let d = sa.model_dim;
        b.add("sa.w_in", vec![ch, d], ch)?;
        for m in ["w_q", "w_k", "w_v", "w_o"] {
            b.add(&format!("sa.{m}"), vec![d, d], d)?;
        }
    }
    b.dense("fc", cfg.flat_dim()?, cfg.output_dim)?;
    Ok(b.store)
}

/// Mirror of the extractor's conv stack, without attention.
pub fn init_decoder(cfg: &ExtractorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    cfg.validate_mirror()?;
    let mut b = Builder::new(Role::Decoder, seed);
    let last = cfg.last_channels();
    b.dense("fc", cfg.output_dim, cfg.n_tokens()? * last)?;
    for i in (0..cfg.conv.len()).rev() {
        let l = &cfg.conv[i];
        let out_ch = if i == 0 {
            cfg.in_channels
        } else {
            cfg.conv[i - 1].filters
        };
        let fan_in = out_ch * l.kernel * l.kernel;
        b.add(
            &format!("deconv{i}.weight"),
            vec![l.filters, out_ch, l.kernel, l.kernel],
            fan_in,
        )?;
        b.add(&format!("deconv{i}.bias"), vec![out_ch], fan_in)?;
    }
    Ok(b.store)
}

pub fn init_head(role: Role, cfg: &EstimatorConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut b = Builder::new(role, seed);
    let mut n_in = cfg.input_dim;
    for (i, &w) in cfg.widths.iter().enumerate() {
        b.dense(&format!("fc{i}"), n_in, w)?;
        n_in = w;
    }
    Ok(b.store)
}

/// Parameters of every role a training method may use.
pub fn init_all(arch: &Architecture, seed: u64, decoder: bool, classifier: bool) -> Result<ParamStore> {
    arch.validate()?;
    let mut store = init_extractor(&arch.extractor, seed)?;
    store.extend(init_head(Role::Estimator, &arch.head, seed)?)?;
    if decoder {
        store.extend(init_decoder(&arch.extractor, seed)?)?;
    }
    if classifier {
        store.extend(init_head(Role::Classifier, &arch.head, seed)?)?;
    }
    Ok(store)
}
