//! The assembled network: parameter storage, initialisation and the
//! end-to-end forward pass from images to label logits.

mod params;
pub mod plan;

pub use params::{Graph, Mode, Param, ParamStore};
pub use plan::{plan, ShapePlan};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone;
use crate::config::{ModelConfig, ModelMode};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit;
use crate::Result;

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(3 / fan_in)` (unit-variance preserving).
    FanIn(usize),
    /// Uniform in `±limit`.
    Uniform(f64),
    Zeros,
    Ones,
}

/// Name, shape and initialiser of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Draws every spec in order from `rng` and stores it.
pub fn materialize(store: &mut ParamStore, specs: &[ParamSpec], rng: &mut ChaCha8Rng, trainable: bool) {
    for spec in specs {
        let value = match spec.init {
            Init::FanIn(fan_in) => Tensor::uniform(&spec.shape, (3.0 / fan_in as f64).sqrt(), rng),
            Init::Uniform(limit) => Tensor::uniform(&spec.shape, limit, rng),
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
        };
        store.insert(spec.name.clone(), value, trainable);
    }
}

/// Backbone ensemble (or patch embedding) plus ViT encoder and head.
#[derive(Clone, Debug, PartialEq)]
pub struct Scopeformer {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Scopeformer {
    /// Validates the config and initialises every parameter from its seeds.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let config = config.canonical()?;
        let mut params = ParamStore::new();
        if let Some(ensemble) = config.ensemble() {
            backbone::init_ensemble(&mut params, &ensemble)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let specs = vit::param_specs(&config.vit, &vit::token_geometry(&config)?);
        materialize(&mut params, &specs, &mut rng, true);
        Ok(Self { config, params })
    }

    pub fn num_labels(&self) -> usize {
        self.config.vit.num_labels
    }

    /// Images `[B, H, W, C]` to logits `[B, num_labels]`.
    pub fn forward(&self, g: &mut Graph<'_>, images: Var) -> Result<Var> {
        let tokens = match self.config.mode {
            ModelMode::NCnnVit => {
                let ensemble = self.config.ensemble().expect("validated n_cnn_vit config");
                let fused = backbone::ensemble_forward(g, &ensemble, images)?;
                vit::tokenize_feature_map(g, &self.config.vit, fused)?
            }
            ModelMode::RawVit => vit::tokenize_patches(g, &self.config.vit, images)?,
        };
        vit::vit_forward(g, &self.config.vit, tokens)
    }

    /// Eval-mode probabilities for a batch of images.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.params, Mode::Eval);
        let x = g.tape.constant(images.clone());
        let logits = self.forward(&mut g, x)?;
        let probs = g.tape.sigmoid(logits);
        Ok(tape.value(probs).clone())
    }
}
