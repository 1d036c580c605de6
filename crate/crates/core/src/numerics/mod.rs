//! Dense tensors, matrix kernels and reverse-mode differentiation.

pub mod functional;
pub mod graph;
pub mod kernels;
pub mod scalar;
pub mod tensor;

pub use functional::{argmax, entropy, log_softmax, soft_cross_entropy, softmax};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn product_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.leaf(Tensor::scalar(3.0));
        let z = g.mul(x, y);
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
        assert_eq!(grads.get(y).unwrap(), &[2.0]);
    }

    #[test]
    fn softmax_ce_gradient_is_p_minus_q() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = g
            .soft_cross_entropy(z, Arc::new(vec![1.0, 0.0]), &[1.0])
            .unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(z).unwrap(), &[-0.5, 0.5]);
    }

    #[test]
    fn backward_rejects_foreign_or_non_scalar() {
        let mut g1 = Graph::<f32>::new();
        let mut g2 = Graph::<f32>::new();
        let _ = g1.leaf(Tensor::scalar(1.0));
        let a = g2.leaf(Tensor::scalar(1.0));
        assert!(matches!(g1.backward(a), Err(crate::Error::Untraced(_))));
        let v = g2.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(g2.backward(v).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.leaf(Tensor::scalar(5.0));
        let y = g.mul(c, x);
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
    }
}
