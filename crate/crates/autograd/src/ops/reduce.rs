use ndarray::{ArrayD, Axis, IxDyn};

use crate::graph::Var;

impl<'g> Var<'g> {
    /// Sum of all elements, as a rank-0 value.
    pub fn sum(&self) -> Var<'g> {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value.sum());
        let dim = self.value.raw_dim();
        self.graph.record(value, &[self], move |g| {
            let s = *g.iter().next().unwrap();
            vec![Some(ArrayD::from_elem(dim.clone(), s))]
        })
    }

    /// Mean of all elements, as a rank-0 value.
    pub fn mean(&self) -> Var<'g> {
        let n = self.value.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Var<'g> {
        let value = self.value.sum_axis(Axis(axis));
        let shape = self.shape().to_vec();
        self.graph.record(value, &[self], move |g| {
            let expanded = g.clone().insert_axis(Axis(axis));
            vec![Some(
                expanded
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis broadcast")
                    .to_owned(),
            )]
        })
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&self, axis: usize) -> Var<'g> {
        let n = self.shape()[axis].max(1) as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Maximum over one axis, removing it. The gradient goes to the first
    /// maximal element along the axis.
    pub fn max_axis(&self, axis: usize) -> Var<'g> {
        let x = &*self.value;
        let len = x.shape()[axis];
        let mut out_shape = x.shape().to_vec();
        out_shape.remove(axis);
        let mut value = ArrayD::from_elem(IxDyn(&out_shape), f64::NEG_INFINITY);
        let mut arg = ArrayD::<usize>::zeros(IxDyn(&out_shape));
        for i in 0..len {
            let lane = x.index_axis(Axis(axis), i);
            ndarray::Zip::from(&mut value)
                .and(&mut arg)
                .and(&lane)
                .for_each(|m, a, &v| {
                    if v > *m {
                        *m = v;
                        *a = i;
                    }
                });
        }
        let shape = x.shape().to_vec();
        self.graph.record(value, &[self], move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&shape));
            for i in 0..shape[axis] {
                let mut lane = gx.index_axis_mut(Axis(axis), i);
                ndarray::Zip::from(&mut lane)
                    .and(&arg)
                    .and(g)
                    .for_each(|o, &a, &gv| {
                        if a == i {
                            *o = gv;
                        }
                    });
            }
            vec![Some(gx)]
        })
    }
}
