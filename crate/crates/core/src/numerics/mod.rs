//! Differentiable computation core: tensors, parameter stores, reverse-mode
//! gradients, the AdamW optimizer and the layer primitives.

mod graph;
pub mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

#[cfg(test)]
mod gradcheck;

pub use graph::{selu_scalar, sigmoid, softmax_in_place, Gradients, Graph, NodeId, SELU_ALPHA, SELU_LAMBDA};
pub use optim::{AdamWConfig, OptimState, Schedule};
pub use params::{GradSet, ParamSet};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

/// Elementwise SELU of a tensor (no graph).
pub fn selu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(selu_scalar)
}

/// Central finite-difference gradient checking utilities.
pub mod fd {
    use super::{ParamSet, Scalar};

    /// Relative error with an absolute floor so vanishing gradients do not
    /// dominate: `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
    }

    /// Central differences of `loss` with respect to every non-frozen
    /// parameter element. Returns `(name, index, numeric)` triples.
    pub fn numeric_grads<T: Scalar>(
        params: &ParamSet<T>,
        h: f64,
        mut loss: impl FnMut(&ParamSet<T>) -> f64,
    ) -> Vec<(String, usize, f64)> {
        let mut work = params.clone();
        let names: Vec<String> = params.names().filter(|n| !params.is_frozen(n)).cloned().collect();
        let mut out = Vec::new();
        for name in names {
            let n = work.get(&name).map(|t| t.len()).unwrap_or(0);
            for i in 0..n {
                let orig = work.get(&name).unwrap().data()[i];
                work.get_mut(&name).unwrap().data_mut()[i] = T::from_f64(orig.as_f64() + h);
                let plus = loss(&work);
                work.get_mut(&name).unwrap().data_mut()[i] = T::from_f64(orig.as_f64() - h);
                let minus = loss(&work);
                work.get_mut(&name).unwrap().data_mut()[i] = orig;
                out.push((name.clone(), i, (plus - minus) / (2.0 * h)));
            }
        }
        out
    }
}
