use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{broadcast_shape, broadcast_strides, for_each_broadcast2};
use crate::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    #[inline]
    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

fn binary<T: Float>(a: &Tensor<T>, b: &Tensor<T>, op: BinOp) -> Tensor<T> {
    let out_shape = broadcast_shape(a.dims(), b.dims()).unwrap_or_else(|| {
        panic!(
            "cannot broadcast {:?} with {:?} in {:?}",
            a.dims(),
            b.dims(),
            op
        )
    });
    let n: usize = out_shape.iter().product();
    let same = a.dims() == b.dims();
    let sa = broadcast_strides(a.dims(), &out_shape);
    let sb = broadcast_strides(b.dims(), &out_shape);
    let mut out = vec![T::zero(); n];
    {
        let (ad, bd) = (a.data(), b.data());
        if same {
            for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                *o = op.apply(x, y);
            }
        } else if b.numel() == 1 {
            let y = bd[0];
            for (o, &x) in out.iter_mut().zip(ad) {
                *o = op.apply(x, y);
            }
        } else {
            for_each_broadcast2(&out_shape, &sa, &sb, |o, ia, ib| {
                out[o] = op.apply(ad[ia], bd[ib]);
            });
        }
    }
    let (ac, bc) = (a.clone(), b.clone());
    let shape_for_bw = out_shape.clone();
    Tensor::from_op(out, out_shape, &[a, b], move |g, _| {
        let (ad, bd) = (ac.data(), bc.data());
        let mut ga = ac.requires_grad().then(|| vec![T::zero(); ac.numel()]);
        let mut gb = bc.requires_grad().then(|| vec![T::zero(); bc.numel()]);
        for_each_broadcast2(&shape_for_bw, &sa, &sb, |o, ia, ib| {
            let go = g[o];
            let (da, db) = match op {
                BinOp::Add => (go, go),
                BinOp::Sub => (go, -go),
                BinOp::Mul => (go * bd[ib], go * ad[ia]),
                BinOp::Div => {
                    let y = bd[ib];
                    (go / y, -go * ad[ia] / (y * y))
                }
            };
            if let Some(ga) = ga.as_mut() {
                ga[ia] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += db;
            }
        });
        vec![ga, gb]
    })
}

impl<T: Float> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        binary(self, rhs, BinOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        binary(self, rhs, BinOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        binary(self, rhs, BinOp::Mul)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Tensor<T> {
        binary(self, rhs, BinOp::Div)
    }

    /// Element-wise map with a derivative expressed through input `x` and output `y`.
    pub(crate) fn map_unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(out, self.dims().to_vec(), &[self], move |g, y| {
            let x = input.data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .zip(y)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect(),
            )]
        })
    }

    /// `a * x + b` with scalar constants.
    pub fn affine(&self, a: f64, b: f64) -> Tensor<T> {
        let (a, b) = (T::of(a), T::of(b));
        self.map_unary(move |x| a * x + b, move |_, _| a)
    }

    pub fn scale(&self, a: f64) -> Tensor<T> {
        self.affine(a, 0.0)
    }

    pub fn add_scalar(&self, b: f64) -> Tensor<T> {
        self.affine(1.0, b)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.affine(-1.0, 0.0)
    }

    pub fn sqr(&self) -> Tensor<T> {
        let two = T::of(2.0);
        self.map_unary(|x| x * x, move |x, _| two * x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let half = T::of(0.5);
        self.map_unary(
            |x| x.sqrt(),
            move |_, y| if y > T::zero() { half / y } else { T::zero() },
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map_unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Tensor<T> {
        self.map_unary(|x| x.ln(), |x, _| x.recip())
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor<T> {
        self.map_unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn powf(&self, p: f64) -> Tensor<T> {
        let pt = T::of(p);
        self.map_unary(move |x| x.powf(pt), move |x, _| pt * x.powf(pt - T::one()))
    }

    /// Clamp with zero gradient outside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.map_unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $inner:ident) => {
        impl<T: Float> $trait<&Tensor<T>> for &Tensor<T> {
            type Output = Tensor<T>;
            fn $method(self, rhs: &Tensor<T>) -> Tensor<T> {
                self.$inner(rhs)
            }
        }
        impl<T: Float> $trait<Tensor<T>> for Tensor<T> {
            type Output = Tensor<T>;
            fn $method(self, rhs: Tensor<T>) -> Tensor<T> {
                (&self).$inner(&rhs)
            }
        }
        impl<T: Float> $trait<&Tensor<T>> for Tensor<T> {
            type Output = Tensor<T>;
            fn $method(self, rhs: &Tensor<T>) -> Tensor<T> {
                (&self).$inner(rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl<T: Float> Neg for &Tensor<T> {
    type Output = Tensor<T>;
    fn neg(self) -> Tensor<T> {
        Tensor::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn broadcast_mul_grads_reduce() {
        let a = Tensor::<f64>::var(vec![1., 2., 3., 4., 5., 6.], &[2, 3]);
        let b = Tensor::<f64>::var(vec![10., 20., 30.], &[3]);
        let y = a.mul(&b).sum_all();
        assert_eq!(y.item(), 10. + 40. + 90. + 40. + 100. + 180.);
        let g = y.backward();
        assert_eq!(g.get(&a).unwrap(), &[10., 20., 30., 10., 20., 30.]);
        assert_eq!(g.get(&b).unwrap(), &[5., 7., 9.]);
    }

    #[test]
    fn shared_parent_accumulates() {
        let a = Tensor::<f64>::var(vec![3.0], &[1]);
        let y = a.mul(&a).add(&a);
        let g = y.sum_all().backward();
        assert_eq!(g.get(&a).unwrap(), &[7.0]);
    }

    #[test]
    fn div_grad() {
        let a = Tensor::<f64>::var(vec![6.0], &[]);
        let b = Tensor::<f64>::var(vec![2.0], &[]);
        let g = a.div(&b).backward();
        assert_eq!(g.get(&a).unwrap(), &[0.5]);
        assert_eq!(g.get(&b).unwrap(), &[-1.5]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let a = Tensor::<f64>::var(vec![1.0, 2.0], &[2]);
        let y = {
            let _g = crate::no_grad();
            a.sqr()
        };
        assert!(!y.requires_grad());
    }
}
