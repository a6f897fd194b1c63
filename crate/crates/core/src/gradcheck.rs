//! Central finite-difference checks of autograd gradients.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::params::ParamStore;
use crate::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(REL_ERROR_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

fn set_entry(store: &ParamStore, name: &str, index: usize, value: f64) -> Result<f64> {
    let var = store.get(name).expect("name taken from the store");
    let shape = var.shape().clone();
    let mut data = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let old = data[index];
    data[index] = value;
    var.set(&Tensor::from_vec(data, shape, var.device())?.to_dtype(var.dtype())?)?;
    Ok(old)
}

fn eval(loss: &impl Fn() -> Result<Tensor>) -> Result<f64> {
    Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compare autograd and central differences on `samples` entries drawn
/// uniformly from the trainable parameters whose names satisfy `select`.
/// `loss` must be deterministic. The store should hold f64 parameters.
pub fn check_gradients<R: Rng + ?Sized>(
    store: &ParamStore,
    select: impl Fn(&str) -> bool,
    samples: usize,
    h: f64,
    rng: &mut R,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<Vec<GradCheck>> {
    let chosen: Vec<(String, usize)> = store
        .named_trainable()
        .filter(|(n, _)| select(n))
        .map(|(n, v)| (n.to_string(), v.elem_count()))
        .collect();
    let total: usize = chosen.iter().map(|(_, c)| c).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no parameters selected".into()));
    }
    let grads = loss()?.backward()?;
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut k = rng.random_range(0..total);
        let (name, index) = chosen
            .iter()
            .find_map(|(n, c)| {
                if k < *c {
                    Some((n.clone(), k))
                } else {
                    k -= c;
                    None
                }
            })
            .expect("k < total");
        let var = store.get(&name).expect("selected from the store");
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[index],
            None => 0.0,
        };
        let x = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[index];
        set_entry(store, &name, index, x + h)?;
        let plus = eval(&loss)?;
        set_entry(store, &name, index, x - h)?;
        let minus = eval(&loss)?;
        set_entry(store, &name, index, x)?;
        out.push(GradCheck {
            param: name,
            index,
            analytic,
            numeric: (plus - minus) / (2.0 * h),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::seeded;
    use candle_core::Device;

    #[test]
    fn quadratic_gradients_match() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let w = store.normal("w", (3, 2), 1.0, &mut seeded(0)).unwrap();
        let x = Tensor::new(&[[0.5f64, -1.0, 2.0]], &Device::Cpu).unwrap();
        let checks = check_gradients(&store, |_| true, 20, 1e-5, &mut seeded(1), || {
            Ok(x.matmul(&w)?.sqr()?.sum_all()?)
        })
        .unwrap();
        assert_eq!(checks.len(), 20);
        assert!(checks.iter().all(|c| c.rel_error() < 1e-7), "{checks:?}");
    }

    #[test]
    fn detects_wrong_gradients() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let w = store.normal("w", 4, 1.0, &mut seeded(0)).unwrap();
        // detach hides the dependence from autograd.
        let checks = check_gradients(&store, |_| true, 5, 1e-5, &mut seeded(1), || {
            Ok(w.detach().sqr()?.sum_all()?.add(&w.sum_all()?)?)
        })
        .unwrap();
        assert!(checks.iter().any(|c| c.rel_error() > 0.1));
    }
}
