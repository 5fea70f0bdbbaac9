use crate::embedding::{Matrix, SegmentedEmbeddings};
use crate::error::{Error, Result};
use crate::model::Gradient;

/// Adam moments for both embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Gradient,
    second: Gradient,
}

impl AdamState {
    pub fn new(embeddings: &SegmentedEmbeddings) -> Self {
        Self::with_constants(embeddings, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(embeddings: &SegmentedEmbeddings, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: Gradient::zeros_like(embeddings),
            second: Gradient::zeros_like(embeddings),
        }
    }
}

fn update_table(params: &mut Matrix, grad: &Matrix, m: &mut Matrix, v: &mut Matrix, state: (f64, f64, f64), lr_t: f64) {
    let (beta1, beta2, eps_t) = state;
    for (((p, &g), m), v) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(m.as_mut_slice())
        .zip(v.as_mut_slice())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr_t * *m / (v.sqrt() + eps_t);
    }
}

/// One bias-corrected Adam step: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    embeddings: &mut SegmentedEmbeddings,
    gradient: &Gradient,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if gradient.entities.rows() != embeddings.entity_count()
        || gradient.relations.rows() != embeddings.relation_count()
        || gradient.entities.cols() != embeddings.dim()
        || state.first.entities.rows() != embeddings.entity_count()
        || state.first.relations.rows() != embeddings.relation_count()
    {
        return Err(Error::Shape("gradient or optimizer state does not match the embeddings".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    // m_hat / (sqrt(v_hat) + eps) == (sqrt(bias2) / bias1) * m / (sqrt(v) + eps * sqrt(bias2))
    let lr_t = learning_rate * bias2.sqrt() / bias1;
    let eps_t = state.epsilon * bias2.sqrt();
    let consts = (state.beta1, state.beta2, eps_t);
    update_table(
        &mut embeddings.entities,
        &gradient.entities,
        &mut state.first.entities,
        &mut state.second.entities,
        consts,
        lr_t,
    );
    update_table(
        &mut embeddings.relations,
        &gradient.relations,
        &mut state.first.relations,
        &mut state.second.relations,
        consts,
        lr_t,
    );
    if !embeddings.is_finite() {
        return Err(Error::Numeric("embeddings became non-finite after an optimizer step".into()));
    }
    Ok(())
}
