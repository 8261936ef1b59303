//! Flat, named views over parameter structs.
//!
//! Optimizers, momentum updates, checkpointing and gradient checks all walk
//! parameters through these views, in one fixed order per struct.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Excluded from weight decay (biases, layer-norm gains and offsets).
    pub no_decay: bool,
}

pub struct TensorViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub no_decay: bool,
}

pub trait Parameters {
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.data.fill(value);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()>
    where
        Self: Sized,
    {
        let src = other.tensors();
        let dst = self.tensors_mut();
        check_same_layout(&dst, &src)?;
        for (d, s) in dst.into_iter().zip(src) {
            for (a, b) in d.data.iter_mut().zip(s.data) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    /// Overwrites every tensor from `arrays` (keyed by `prefix + name`).
    fn assign_from(&mut self, prefix: &str, arrays: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        for t in self.tensors_mut() {
            let key = format!("{prefix}{}", t.name);
            let (shape, data) = arrays
                .get(&key)
                .ok_or_else(|| Error::Weights(format!("missing array {key:?}")))?;
            if *shape != t.shape {
                return Err(Error::Shape(format!(
                    "array {key:?} has shape {shape:?}, expected {:?}",
                    t.shape
                )));
            }
            t.data.copy_from_slice(data);
        }
        Ok(())
    }
}

pub(crate) fn check_same_layout(a: &[TensorViewMut<'_>], b: &[TensorView<'_>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "parameter sets have {} and {} tensors",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape != y.shape || x.name != y.name {
            return Err(Error::Shape(format!(
                "tensor {} {:?} vs {} {:?}",
                x.name, x.shape, y.name, y.shape
            )));
        }
    }
    Ok(())
}

macro_rules! view {
    ($name:expr, $arr:expr, $no_decay:expr) => {
        $crate::params::TensorView {
            name: $name.to_string(),
            shape: $arr.shape().to_vec(),
            data: $arr.as_slice().expect("standard layout"),
            no_decay: $no_decay,
        }
    };
}

macro_rules! view_mut {
    ($name:expr, $arr:expr, $no_decay:expr) => {{
        let shape = $arr.shape().to_vec();
        $crate::params::TensorViewMut {
            name: $name.to_string(),
            shape,
            data: $arr.as_slice_mut().expect("standard layout"),
            no_decay: $no_decay,
        }
    }};
}

pub(crate) use view;
pub(crate) use view_mut;
