//! Uniform access to named parameter arrays, used by the optimizer, the
//! checkpoint format and the parameter counter.

use crate::tape::StatUpdate;
use crate::tensor::{ConvParams, LinearParams, NormParams, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Updated by the optimizer.
    Learnable,
    /// Running statistics; saved but not trained.
    Buffer,
}

pub struct ParamView<'a, T> {
    pub name: String,
    pub slot: Slot,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ParamViewMut<'a, T> {
    pub name: String,
    pub slot: Slot,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

pub trait Parameters<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(ParamView<'_, T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>));
    fn norms_mut(&mut self) -> Vec<&mut NormParams<T>>;

    /// Fold queued batch statistics into the matching running estimates.
    fn commit_stats(&mut self, updates: &[StatUpdate]) {
        let mut norms = self.norms_mut();
        for u in updates {
            if let Some(n) = norms.iter_mut().find(|n| n.name == u.name) {
                n.update_running(&u.mean, &u.var, u.count);
            }
        }
    }

    fn learnable_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |p| {
            if p.slot == Slot::Learnable {
                total += p.data.len();
            }
        });
        total
    }
}

impl<T: Scalar> Parameters<T> for ConvParams<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        f(ParamView {
            name: format!("{}.weight", self.name),
            slot: Slot::Learnable,
            shape: self.weight.shape().to_vec(),
            data: self.weight.data(),
        });
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        let shape = self.weight.shape().to_vec();
        f(ParamViewMut {
            name: format!("{}.weight", self.name),
            slot: Slot::Learnable,
            shape,
            data: self.weight.data_mut(),
        });
    }

    fn norms_mut(&mut self) -> Vec<&mut NormParams<T>> {
        Vec::new()
    }
}

impl<T: Scalar> Parameters<T> for NormParams<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        let c = vec![self.channels()];
        for (suffix, slot, data) in [
            ("gamma", Slot::Learnable, &self.gamma),
            ("beta", Slot::Learnable, &self.beta),
            ("running_mean", Slot::Buffer, &self.running_mean),
            ("running_var", Slot::Buffer, &self.running_var),
        ] {
            f(ParamView {
                name: format!("{}.{suffix}", self.name),
                slot,
                shape: c.clone(),
                data,
            });
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        let c = vec![self.channels()];
        let name = self.name.clone();
        for (suffix, slot, data) in [
            ("gamma", Slot::Learnable, &mut self.gamma),
            ("beta", Slot::Learnable, &mut self.beta),
            ("running_mean", Slot::Buffer, &mut self.running_mean),
            ("running_var", Slot::Buffer, &mut self.running_var),
        ] {
            f(ParamViewMut {
                name: format!("{name}.{suffix}"),
                slot,
                shape: c.clone(),
                data,
            });
        }
    }

    fn norms_mut(&mut self) -> Vec<&mut NormParams<T>> {
        vec![self]
    }
}

impl<T: Scalar> Parameters<T> for LinearParams<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        f(ParamView {
            name: format!("{}.weight", self.name),
            slot: Slot::Learnable,
            shape: vec![self.in_features, self.out_features],
            data: &self.weight,
        });
        f(ParamView {
            name: format!("{}.bias", self.name),
            slot: Slot::Learnable,
            shape: vec![self.out_features],
            data: &self.bias,
        });
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        let (i, o) = (self.in_features, self.out_features);
        f(ParamViewMut {
            name: format!("{}.weight", self.name),
            slot: Slot::Learnable,
            shape: vec![i, o],
            data: &mut self.weight,
        });
        f(ParamViewMut {
            name: format!("{}.bias", self.name),
            slot: Slot::Learnable,
            shape: vec![o],
            data: &mut self.bias,
        });
    }

    fn norms_mut(&mut self) -> Vec<&mut NormParams<T>> {
        Vec::new()
    }
}

/// Implements [`Parameters`] for a struct by delegating to the listed fields
/// (and optional fields) in order.
macro_rules! delegate_parameters {
    ($ty:ident { $($field:ident),* } $(opt { $($ofield:ident),* })?) => {
        impl<T: $crate::tensor::Scalar> $crate::params::Parameters<T> for $ty<T> {
            fn visit(&self, f: &mut dyn FnMut($crate::params::ParamView<'_, T>)) {
                $( self.$field.visit(f); )*
                $($( if let Some(x) = &self.$ofield { x.visit(f); } )*)?
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut($crate::params::ParamViewMut<'_, T>)) {
                $( self.$field.visit_mut(f); )*
                $($( if let Some(x) = &mut self.$ofield { x.visit_mut(f); } )*)?
            }
            fn norms_mut(&mut self) -> Vec<&mut $crate::tensor::NormParams<T>> {
                let mut out = Vec::new();
                $( out.extend(self.$field.norms_mut()); )*
                $($( if let Some(x) = &mut self.$ofield { out.extend(x.norms_mut()); } )*)?
                out
            }
        }
    };
}
pub(crate) use delegate_parameters;

/// Parameter-free ops.
impl<T: Scalar> Parameters<T> for () {
    fn visit(&self, _: &mut dyn FnMut(ParamView<'_, T>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(ParamViewMut<'_, T>)) {}
    fn norms_mut(&mut self) -> Vec<&mut NormParams<T>> {
        Vec::new()
    }
}
