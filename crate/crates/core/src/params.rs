//! Helpers for structs that own named parameter tensors.

use crate::numerics::Tensor;

pub(crate) type Visit<'a> = Vec<(String, &'a Tensor)>;
pub(crate) type VisitMut<'a> = Vec<(String, &'a mut Tensor)>;

/// Implements `visit`/`visit_mut` for a struct whose listed fields are tensors.
macro_rules! tensor_fields {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut $crate::params::Visit<'a>) {
                $( out.push((format!("{prefix}{}", stringify!($field)), &self.$field)); )*
            }

            pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut $crate::params::VisitMut<'a>) {
                $( out.push((format!("{prefix}{}", stringify!($field)), &mut self.$field)); )*
            }
        }
    };
}

pub(crate) use tensor_fields;

/// Truncated normal draw (two standard deviations) scaled by `std`.
pub(crate) fn trunc_normal<R: rand::Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
