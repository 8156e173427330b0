use crate::error::{shape_err, Result};
use crate::real::{gemm, Real};
use crate::tape::{OpKind, Var};
use crate::tensor::Tensor;

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return shape_err(
            "matmul",
            format!("expected 2-D operands, got {:?} and {:?}", a.shape(), b.shape()),
        );
    };
    if k != k2 {
        return shape_err(
            "matmul",
            format!("inner dimensions differ: {:?} · {:?}", a.shape(), b.shape()),
        );
    }
    let mut out = vec![T::zero(); m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n, false, false, false);
    Tensor::new(vec![m, n], out)
}

impl<T: Real> Var<T> {
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = matmul(self.value(), other.value())?;
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        let a = self.value().clone();
        let b = other.value().clone();
        Ok(self.tape().record(OpKind::MatMul, &[self, other], out, move |g| {
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            let ga = need_a.then(|| {
                let mut d = vec![T::zero(); m * k];
                gemm(g.data(), b.data(), &mut d, m, n, k, false, true, false);
                Tensor::new(vec![m, k], d).unwrap()
            });
            let gb = need_b.then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm(a.data(), g.data(), &mut d, k, m, n, true, false, false);
                Tensor::new(vec![k, n], d).unwrap()
            });
            vec![ga, gb]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product() {
        let i = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i, &a).unwrap(), a);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::<f64>::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::from_f64(vec![2, 1], &[3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn inner_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matmul(&a, &b).is_err());
    }
}
