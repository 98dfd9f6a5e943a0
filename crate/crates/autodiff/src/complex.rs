//! Complex values as paired real/imaginary tensors on the tape.

use crate::tape::Var;
use crate::tensor::Tensor;

/// A complex tensor: two real tensors of identical shape.
#[derive(Clone)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl CVar {
    pub fn new(re: Var, im: Var) -> Self {
        assert_eq!(re.shape(), im.shape(), "complex parts must share a shape");
        Self { re, im }
    }

    /// Purely real value with zero imaginary part.
    pub fn from_real(re: Var) -> Self {
        let (r, c) = re.shape();
        let im = re.tape().constant(Tensor::zeros(r, c));
        Self { re, im }
    }

    /// e^{-j phase}: (cos phase, -sin phase).
    pub fn from_neg_phase(phase: &Var) -> Self {
        Self { re: phase.cos(), im: phase.sin().negate() }
    }

    pub fn add(&self, other: &CVar) -> CVar {
        CVar { re: &self.re + &other.re, im: &self.im + &other.im }
    }

    /// Elementwise complex product.
    pub fn mul(&self, other: &CVar) -> CVar {
        let re = &(&self.re * &other.re) - &(&self.im * &other.im);
        let im = &(&self.re * &other.im) + &(&self.im * &other.re);
        CVar { re, im }
    }

    /// Scale by a real tensor of the same shape.
    pub fn mul_real(&self, real: &Var) -> CVar {
        CVar { re: &self.re * real, im: &self.im * real }
    }

    /// |z|^2 elementwise.
    pub fn abs2(&self) -> Var {
        &(&self.re * &self.re) + &(&self.im * &self.im)
    }

    /// Complex matmul `self (n x k) * other (k x m)`.
    pub fn matmul(&self, other: &CVar) -> CVar {
        let re = &self.re.matmul(&other.re) - &self.im.matmul(&other.im);
        let im = &self.re.matmul(&other.im) + &self.im.matmul(&other.re);
        CVar { re, im }
    }

    /// Conjugate-transpose matmul: `conj(self)^T (k x n) * other`... used as
    /// `self^H * other` where self is n x k.
    pub fn conj(&self) -> CVar {
        CVar { re: self.re.clone(), im: self.im.negate() }
    }

    pub fn transpose(&self) -> CVar {
        CVar { re: self.re.transpose(), im: self.im.transpose() }
    }

    pub fn sum_axis0(&self) -> CVar {
        CVar { re: self.re.sum_axis0(), im: self.im.sum_axis0() }
    }

    pub fn values(&self) -> (Tensor, Tensor) {
        (self.re.value(), self.im.value())
    }
}
