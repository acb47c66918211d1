use rand::Rng;

use super::tensor::Tensor;

/// Kaiming-uniform (fan-in, ReLU gain): U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}
