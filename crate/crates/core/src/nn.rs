//! Parameter initialization and small layer helpers shared by the networks.

use bfr_autograd::{Float, ParamStore, Tape, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::seed::Rng;

pub fn normal<T: Float>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// He-initialized `[out, in, k, k]` weights; `slope` is the negative slope
/// of the activation that follows.
pub fn init_conv<T: Float>(
    store: &mut ParamStore<T>,
    name: &str,
    (out, inp, k): (usize, usize, usize),
    slope: f64,
    rng: &mut Rng,
) -> Result<()> {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let std = gain / ((inp * k * k) as f64).sqrt();
    store.insert(
        format!("{name}.weight"),
        normal(&[out, inp, k, k], std, rng),
    )?;
    Ok(())
}

pub fn init_linear<T: Float>(
    store: &mut ParamStore<T>,
    name: &str,
    out: usize,
    inp: usize,
    std: f64,
    rng: &mut Rng,
) -> Result<()> {
    store.insert(format!("{name}.weight"), normal(&[out, inp], std, rng))?;
    Ok(())
}

pub fn init_const<T: Float>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    value: f64,
) -> Result<()> {
    store.insert(name, Tensor::full(shape.to_vec(), T::of(value)))?;
    Ok(())
}

/// Convolution with `{name}.weight` plus `{name}.bias` when present; same
/// padding for odd kernels.
pub fn conv<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    name: &str,
    stride: usize,
) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let k = tape.shape(w)[3];
    let y = tape.conv2d(x, w, stride, k / 2)?;
    bias(tape, store, y, name)
}

pub fn linear<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    name: &str,
) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let y = tape.linear(x, w)?;
    bias(tape, store, y, name)
}

fn bias<T: Float>(tape: &mut Tape<T>, store: &ParamStore<T>, y: Var, name: &str) -> Result<Var> {
    let bname = format!("{name}.bias");
    if !store.contains(&bname) {
        return Ok(y);
    }
    let b = tape.param(store, &bname)?;
    Ok(tape.channel_bias(y, b)?)
}

pub fn prelu<T: Float>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    name: &str,
) -> Result<Var> {
    let a = tape.param(store, name)?;
    Ok(tape.prelu(x, a)?)
}

/// Resolution ladder `base, base/2, …, min` (fine to coarse).
pub fn ladder(base: usize, min: usize) -> Vec<usize> {
    std::iter::successors(Some(base), |&r| (r > min).then_some(r / 2)).collect()
}

pub fn is_pow2(v: usize) -> bool {
    v.is_power_of_two()
}

/// Number of scalars under `prefix`.
pub fn scalar_count<T: Float>(store: &ParamStore<T>, prefix: &str) -> usize {
    store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(_, t)| t.numel())
        .sum()
}
