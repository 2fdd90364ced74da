use std::sync::Arc;

use ndarray::{Axis, Zip};

use crate::graph::{Array, Var};

/// Reduces a broadcast gradient back to `shape` by summing the expanded axes.
pub(crate) fn sum_to_shape(grad: &Array, shape: &[usize]) -> Array {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

impl<'g> Var<'g> {
    /// Broadcasting `self + other`.
    pub fn add(&self, other: &Var<'g>) -> Var<'g> {
        let value = &*self.value + &*other.value;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        self.graph.record(value, &[self, other], move |g| {
            vec![Some(sum_to_shape(g, &sa)), Some(sum_to_shape(g, &sb))]
        })
    }

    /// Broadcasting `self - other`.
    pub fn sub(&self, other: &Var<'g>) -> Var<'g> {
        let value = &*self.value - &*other.value;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        self.graph.record(value, &[self, other], move |g| {
            vec![Some(sum_to_shape(g, &sa)), Some(-sum_to_shape(g, &sb))]
        })
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: &Var<'g>) -> Var<'g> {
        let value = &*self.value * &*other.value;
        let (a, b) = (Arc::clone(&self.value), Arc::clone(&other.value));
        self.graph.record(value, &[self, other], move |g| {
            vec![
                Some(sum_to_shape(&(g * &*b), a.shape())),
                Some(sum_to_shape(&(g * &*a), b.shape())),
            ]
        })
    }

    /// Broadcasting elementwise quotient.
    pub fn div(&self, other: &Var<'g>) -> Var<'g> {
        let value = &*self.value / &*other.value;
        let (a, b) = (Arc::clone(&self.value), Arc::clone(&other.value));
        self.graph.record(value, &[self, other], move |g| {
            let ga = g / &*b;
            let gb = -(&ga * &*a) / &*b;
            vec![
                Some(sum_to_shape(&ga, a.shape())),
                Some(sum_to_shape(&gb, b.shape())),
            ]
        })
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let value = &*self.value * c;
        self.graph
            .record(value, &[self], move |g| vec![Some(g * c)])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let value = &*self.value + c;
        self.graph.record(value, &[self], |g| vec![Some(g.clone())])
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map_elementwise<F, D>(&self, f: F, df: D) -> Var<'g>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let value = self.value.map(|&x| f(x));
        let x = Arc::clone(&self.value);
        let y = Arc::new(value.clone());
        self.graph.record(value, &[self], move |g| {
            let mut out = g.clone();
            Zip::from(&mut out)
                .and(&*x)
                .and(&*y)
                .for_each(|o, &x, &y| *o *= df(x, y));
            vec![Some(out)]
        })
    }

    pub fn square(&self) -> Var<'g> {
        self.map_elementwise(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.map_elementwise(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Var<'g> {
        self.map_elementwise(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'g> {
        self.map_elementwise(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.map_elementwise(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Var<'g> {
        self.map_elementwise(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'g> {
        self.map_elementwise(gelu, gelu_grad)
    }

    /// `max(x, floor)`; no gradient below the floor.
    pub fn clamp_min(&self, floor: f64) -> Var<'g> {
        self.map_elementwise(
            move |x| x.max(floor),
            move |x, _| if x > floor { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise smooth-L1 (Huber with slope 1): `0.5 x^2 / beta` inside
    /// `|x| < beta`, `|x| - 0.5 beta` outside.
    pub fn smooth_l1(&self, beta: f64) -> Var<'g> {
        self.map_elementwise(
            move |x| {
                let a = x.abs();
                if a < beta {
                    0.5 * x * x / beta
                } else {
                    a - 0.5 * beta
                }
            },
            move |x, _| {
                if x.abs() < beta {
                    x / beta
                } else {
                    x.signum()
                }
            },
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64, _y: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
