//! Pointwise and broadcast arithmetic, activations, reductions.

use crate::autodiff::{Grads, Tape, Var};
use crate::elem::{sigmoid, softplus, Scalar};
use crate::tensor::Tensor;

use super::{broadcast_shape, broadcast_strides, reduce_to_shape};

fn binary_forward<E: Scalar>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E,
) -> Tensor<E> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let (da, db) = (a.data(), b.data());
    for _ in 0..numel {
        let mut pa = 0;
        let mut pb = 0;
        for i in 0..rank {
            pa += idx[i] * sa[i];
            pb += idx[i] * sb[i];
        }
        out.push(f(da[pa], db[pb]));
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

/// a + b with broadcasting.
pub fn add<E: Scalar>(tape: &Tape<E>, a: Var, b: Var) -> Var {
    let (va, vb) = (tape.value(a), tape.value(b));
    let out = binary_forward(&va, &vb, |x, y| x + y);
    let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
    tape.push(out, move |g, grads: &mut Grads<E>| {
        grads.add(a, reduce_to_shape(g, &sa));
        grads.add(b, reduce_to_shape(g, &sb));
    })
}

/// a - b with broadcasting.
pub fn sub<E: Scalar>(tape: &Tape<E>, a: Var, b: Var) -> Var {
    let (va, vb) = (tape.value(a), tape.value(b));
    let out = binary_forward(&va, &vb, |x, y| x - y);
    let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
    tape.push(out, move |g, grads: &mut Grads<E>| {
        grads.add(a, reduce_to_shape(g, &sa));
        let gneg = g.map(|v| -v);
        grads.add(b, reduce_to_shape(&gneg, &sb));
    })
}

/// a * b elementwise with broadcasting.
pub fn mul<E: Scalar>(tape: &Tape<E>, a: Var, b: Var) -> Var {
    let (va, vb) = (tape.value(a), tape.value(b));
    let out = binary_forward(&va, &vb, |x, y| x * y);
    let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
    tape.push(out, move |g, grads: &mut Grads<E>| {
        let ga = binary_forward(g, &vb, |x, y| x * y);
        grads.add(a, reduce_to_shape(&ga, &sa));
        let gb = binary_forward(g, &va, |x, y| x * y);
        grads.add(b, reduce_to_shape(&gb, &sb));
    })
}

pub fn neg<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    let v = tape.value(x).map(|a| -a);
    tape.push(v, move |g, grads: &mut Grads<E>| {
        grads.add(x, g.map(|a| -a));
    })
}

/// x * c for a constant.
pub fn scale<E: Scalar>(tape: &Tape<E>, x: Var, c: E) -> Var {
    let v = tape.value(x).scale(c);
    tape.push(v, move |g, grads: &mut Grads<E>| {
        grads.add(x, g.scale(c));
    })
}

/// x + c for a constant.
pub fn add_scalar<E: Scalar>(tape: &Tape<E>, x: Var, c: E) -> Var {
    let v = tape.value(x).map(|a| a + c);
    tape.push(v, move |g, grads: &mut Grads<E>| {
        grads.add(x, g.clone());
    })
}

fn unary<E: Scalar>(
    tape: &Tape<E>,
    x: Var,
    f: impl Fn(E) -> E,
    // derivative as a function of (input, output)
    df: impl Fn(E, E) -> E + 'static,
) -> Var {
    let vx = tape.value(x);
    let out = vx.map(f);
    let vy = out.clone();
    tape.push(out, move |g, grads: &mut Grads<E>| {
        let mut gx = g.clone();
        let data = gx.data_mut();
        for (i, d) in data.iter_mut().enumerate() {
            *d = *d * df(vx.data()[i], vy.data()[i]);
        }
        grads.add(x, gx);
    })
}

pub fn relu<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    unary(
        tape,
        x,
        |a| if a > E::ZERO { a } else { E::ZERO },
        |a, _| if a > E::ZERO { E::ONE } else { E::ZERO },
    )
}

pub fn sigmoid_op<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    unary(tape, x, sigmoid, |_, y| y * (E::ONE - y))
}

/// SiLU / swish: x * sigmoid(x).
pub fn silu<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    unary(
        tape,
        x,
        |a| a * sigmoid(a),
        |a, _| {
            let s = sigmoid(a);
            s * (E::ONE + a * (E::ONE - s))
        },
    )
}

pub fn softplus_op<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    unary(tape, x, softplus, |a, _| sigmoid(a))
}

pub fn exp_op<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    unary(tape, x, |a| a.exp(), |_, y| y)
}

/// Sum over all elements, producing shape [1].
pub fn sum_all<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    let vx = tape.value(x);
    let mut acc = E::ZERO;
    for &v in vx.data() {
        acc += v;
    }
    let shape = vx.shape().to_vec();
    tape.push(Tensor::scalar(acc), move |g, grads: &mut Grads<E>| {
        grads.add(x, Tensor::full(&shape, g.data()[0]));
    })
}

/// Mean over all elements, producing shape [1].
pub fn mean_all<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    let n = tape.value(x).numel();
    let s = sum_all(tape, x);
    scale(tape, s, E::ONE / E::from_f64(n as f64))
}
