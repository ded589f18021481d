use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::tensor::Matrix;

/// Uniform init bound for every generated weight.
pub(crate) const INIT_BOUND: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub config: ModelConfig,
    /// `vocab_size x d_model`
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    /// `d_model x vocab_size`
    pub unembedding: Matrix,
}

pub(crate) fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-INIT_BOUND..=INIT_BOUND))
}

/// Deterministically generates base weights from `config.rng_seed`.
pub fn generate_weights(config: &ModelConfig) -> Result<BaseWeights, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let d = config.d_model;
    let embedding = uniform_matrix(&mut rng, config.vocab_size, d);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            wq: uniform_matrix(&mut rng, d, d),
            wk: uniform_matrix(&mut rng, d, d),
            wv: uniform_matrix(&mut rng, d, d),
            wo: uniform_matrix(&mut rng, d, d),
            w_up: uniform_matrix(&mut rng, d, config.mlp_dim()),
            w_down: uniform_matrix(&mut rng, config.mlp_dim(), d),
        })
        .collect();
    let unembedding = uniform_matrix(&mut rng, d, config.vocab_size);
    Ok(BaseWeights {
        config: config.clone(),
        embedding,
        layers,
        unembedding,
    })
}
