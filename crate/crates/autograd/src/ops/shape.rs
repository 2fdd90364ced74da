use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};

use super::elementwise::sum_to_shape;
use crate::graph::Var;

impl<'g> Var<'g> {
    /// Row-major reshape.
    ///
    /// # Panics
    /// Panics if the element count differs.
    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let value = self
            .value
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", self.shape(), shape));
        let orig = self.shape().to_vec();
        self.graph.record(value, &[self], move |g| {
            vec![Some(
                g.clone()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape backward"),
            )]
        })
    }

    /// Axis permutation; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Var<'g> {
        let value = self
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph.record(value, &[self], move |g| {
            vec![Some(
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned(),
            )]
        })
    }

    /// Broadcasts to `shape` (numpy rules), materializing the copy.
    pub fn broadcast_to(&self, shape: &[usize]) -> Var<'g> {
        let value = self
            .value
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast {:?} -> {:?}", self.shape(), shape))
            .to_owned();
        let orig = self.shape().to_vec();
        self.graph
            .record(value, &[self], move |g| vec![Some(sum_to_shape(g, &orig))])
    }

    /// Elements `start..end` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Var<'g> {
        let value = self
            .value
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let shape = self.shape().to_vec();
        self.graph.record(value, &[self], move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&shape));
            gx.slice_axis_mut(Axis(axis), Slice::from(start..end))
                .assign(g);
            vec![Some(gx)]
        })
    }

    /// Rows `indices` of a 2-D value; the gradient scatter-adds back.
    pub fn gather_rows(&self, indices: &[usize]) -> Var<'g> {
        assert_eq!(self.value.ndim(), 2, "gather_rows needs a matrix");
        let value = self.value.select(Axis(0), indices);
        let idx = indices.to_vec();
        let shape = self.shape().to_vec();
        self.graph.record(value, &[self], move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&shape));
            for (row, &i) in idx.iter().enumerate() {
                let src = g.index_axis(Axis(0), row);
                let mut dst = gx.index_axis_mut(Axis(0), i);
                dst += &src;
            }
            vec![Some(gx)]
        })
    }
}

/// Concatenation along `axis`.
///
/// # Panics
/// Panics if `vars` is empty or shapes disagree off `axis`.
pub fn concat<'g>(vars: &[&Var<'g>], axis: usize) -> Var<'g> {
    assert!(!vars.is_empty(), "concat of nothing");
    let views: Vec<_> = vars.iter().map(|v| v.value().view()).collect();
    let value = concatenate(Axis(axis), &views).expect("concat shapes");
    let sizes: Vec<usize> = vars.iter().map(|v| v.shape()[axis]).collect();
    vars[0].graph().record(value, vars, move |g| {
        let mut start = 0;
        sizes
            .iter()
            .map(|&n| {
                let part = g
                    .slice_axis(Axis(axis), Slice::from(start..start + n))
                    .to_owned();
                start += n;
                Some(part)
            })
            .collect()
    })
}
