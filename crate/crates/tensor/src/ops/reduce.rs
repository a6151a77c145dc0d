use super::{broadcast_strides, for_each_broadcast2, strides_of};
use crate::{Float, Tensor};

impl<T: Float> Tensor<T> {
    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sums over `axes`, keeping them as size-1 axes when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<T> {
        let in_shape = self.dims().to_vec();
        for &a in axes {
            assert!(
                a < in_shape.len(),
                "axis {a} out of range for {:?}",
                in_shape
            );
        }
        let mut kept = in_shape.clone();
        for &a in axes {
            kept[a] = 1;
        }
        let in_strides = strides_of(&in_shape);
        let out_strides = broadcast_strides(&kept, &in_shape);
        let mut out = vec![T::zero(); kept.iter().product()];
        let x = self.data();
        for_each_broadcast2(&in_shape, &in_strides, &out_strides, |o, _, io| {
            out[io] += x[o];
        });
        let out_shape = if keepdim {
            kept
        } else {
            in_shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        Tensor::from_op(out, out_shape, &[self], move |g, _| {
            let mut gx = vec![T::zero(); in_shape.iter().product()];
            for_each_broadcast2(&in_shape, &in_strides, &out_strides, |o, _, io| {
                gx[o] = g[io];
            });
            vec![Some(gx)]
        })
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<T> {
        let count: usize = axes.iter().map(|&a| self.dims()[a]).product();
        self.sum_axes(axes, keepdim)
            .scale(1.0 / count.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn sum_axes_values_and_grad() {
        let x = Tensor::<f64>::var((0..24).map(|v| v as f64).collect(), &[2, 3, 4]);
        let s = x.sum_axes(&[0, 2], true);
        assert_eq!(s.dims(), &[1, 3, 1]);
        // axis-1 index 0: values 0..4 and 12..16
        assert_eq!(s.data()[0], (0 + 1 + 2 + 3 + 12 + 13 + 14 + 15) as f64);
        let w = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3, 1]);
        let g = s.mul(&w).sum_all().backward();
        let gx = g.get(&x).unwrap();
        assert_eq!(gx[0], 1.0);
        assert_eq!(gx[4], 2.0);
        assert_eq!(gx[23], 3.0);
        let flat = x.sum_axes(&[1], false);
        assert_eq!(flat.dims(), &[2, 4]);
    }

    #[test]
    fn mean_all_scalar() {
        let x = Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0, 6.0], &[2, 2]);
        assert_eq!(x.mean_all().item(), 3.0);
    }
}
