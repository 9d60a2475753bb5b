//! Central finite-difference gradient checking. The oracle re-evaluates the
//! forward pass with perturbed parameters and never touches the backward
//! path it is checking.

use super::{BoundParams, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked_elements: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn eval_loss(params: &ParamStore, forward: &dyn Fn(&mut Tape, &BoundParams) -> Var) -> f64 {
    let mut tape = Tape::no_grad();
    let bound = BoundParams::bind(params, &mut tape, false);
    let loss = forward(&mut tape, &bound);
    tape.value(loss).item()
}

/// Compares analytic gradients of a scalar loss against central finite
/// differences for every trainable parameter element.
///
/// `forward` must be deterministic (eval-mode batchnorm, no drop-path).
/// Relative error uses denominator max(|analytic|, |fd|, 1e-6).
pub fn grad_check(
    params: &ParamStore,
    step: f64,
    forward: &dyn Fn(&mut Tape, &BoundParams) -> Var,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(params, &mut tape, true);
    let loss = forward(&mut tape, &bound);
    assert!(
        tape.value(loss).is_finite(),
        "grad_check loss is non-finite"
    );
    let grads = tape.backward(loss);

    let mut store = params.clone();
    let mut max_rel = 0.0;
    let mut worst = String::new();
    let mut checked = 0;
    for ix in 0..params.len() {
        if !params.trainable_at(ix) {
            continue;
        }
        let analytic: Vec<f64> = match grads.get(bound.var_at(ix)) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; params.tensor_at(ix).numel()],
        };
        for e in 0..analytic.len() {
            let orig = store.tensor_at(ix).data()[e];
            store.tensor_at_mut(ix).data_mut()[e] = orig + step;
            let lp = eval_loss(&store, forward);
            store.tensor_at_mut(ix).data_mut()[e] = orig - step;
            let lm = eval_loss(&store, forward);
            store.tensor_at_mut(ix).data_mut()[e] = orig;
            let fd = (lp - lm) / (2.0 * step);
            assert!(fd.is_finite(), "finite-difference probe is non-finite");
            let a = analytic[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}] analytic={a:.3e} fd={fd:.3e}", params.name_at(ix), e);
            }
        }
    }
    GradCheckReport { max_rel_err: max_rel, worst_param: worst, checked_elements: checked }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::tensor::Tensor;

    #[test]
    fn linear_layer_grad_check() {
        let mut rng = rng_for(3, "gradcheck", &[]);
        let mut params = ParamStore::new();
        params.insert("w", Tensor::trunc_normal(&[3, 2], 0.5, &mut rng), true);
        params.insert("b", Tensor::trunc_normal(&[2], 0.5, &mut rng), true);
        let x = Tensor::trunc_normal(&[4, 3], 1.0, &mut rng);
        let report = grad_check(&params, 1e-3, &move |tape, bound| {
            let xv = tape.constant(x.clone());
            let w = bound.var("w");
            let b = bound.var("b");
            let h = tape.matmul(xv, w);
            let h = tape.add_bias(h, b);
            let h = tape.gelu(h);
            let flat = tape.reshape(h, &[8, 1]);
            let ones = tape.constant(Tensor::full(&[1, 8], 1.0));
            let s = tape.matmul(ones, flat);
            tape.reshape(s, &[])
        });
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }
}
