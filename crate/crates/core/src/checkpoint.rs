//! Single-file JSON checkpoints. Shared kernels are stored once; each DSBN
//! site stores both domains under `dsbn.<layer>.<S|T>.*`. A teacher, when
//! present, is stored under the `teacher/` key prefix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{build_model, Architecture, ModelParams};
use crate::{Error, Result};

pub const TEACHER_PREFIX: &str = "teacher/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub iteration: usize,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub student: ModelParams,
    pub teacher: Option<ModelParams>,
    pub iteration: usize,
}

fn collect(m: &ModelParams, prefix: &str, out: &mut BTreeMap<String, TensorEntry>) {
    m.visit(&mut |name, _, shape, data| {
        out.insert(
            format!("{prefix}{name}"),
            TensorEntry {
                shape: shape.to_vec(),
                data: data.to_vec(),
            },
        );
    });
}

fn restore(arch: &Architecture, tensors: &BTreeMap<String, TensorEntry>, prefix: &str) -> Result<ModelParams> {
    let mut m = build_model(arch, 0)?;
    let mut err = None;
    m.visit_mut(&mut |name, _, data| {
        if err.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match tensors.get(&key) {
            Some(t) if t.data.len() == data.len() && t.shape.iter().product::<usize>() == data.len() => {
                data.copy_from_slice(&t.data)
            }
            Some(_) => err = Some(Error::Structural(format!("tensor {key} has the wrong size"))),
            None => err = Some(Error::Structural(format!("checkpoint lacks tensor {key}"))),
        }
    });
    err.map_or(Ok(m), Err)
}

impl Checkpoint {
    pub fn new(student: &ModelParams, teacher: Option<&ModelParams>, iteration: usize) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        collect(student, "", &mut tensors);
        if let Some(t) = teacher {
            if t.arch != student.arch {
                return Err(Error::Structural("teacher and student architectures differ".into()));
            }
            collect(t, TEACHER_PREFIX, &mut tensors);
        }
        Ok(Self {
            arch: student.arch.clone(),
            iteration,
            tensors,
        })
    }

    pub fn restore(&self) -> Result<LoadedCheckpoint> {
        let student = restore(&self.arch, &self.tensors, "")?;
        let has_teacher = self.tensors.keys().any(|k| k.starts_with(TEACHER_PREFIX));
        let teacher = if has_teacher {
            Some(restore(&self.arch, &self.tensors, TEACHER_PREFIX)?)
        } else {
            None
        };
        Ok(LoadedCheckpoint {
            student,
            teacher,
            iteration: self.iteration,
        })
    }
}

pub fn save_checkpoint(
    path: &Path,
    student: &ModelParams,
    teacher: Option<&ModelParams>,
    iteration: usize,
) -> Result<()> {
    let ck = Checkpoint::new(student, teacher, iteration)?;
    let text = serde_json::to_string(&ck)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.restore()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::DomainId;
    use ndarray::Array4;

    #[test]
    fn round_trip_is_bit_exact_for_both_routes() {
        let arch = Architecture::new(vec![4, 8], 3);
        let mut m = build_model(&arch, 5).unwrap();
        let x = Array4::from_shape_fn((2, 1, 8, 8), |(n, _, y, x)| ((n + y * 3 + x) % 7) as f64 / 7.0);
        m.forward_segment(&x, DomainId::Source, Mode::Train).unwrap();
        m.forward_segment(&(&x * 0.5), DomainId::Target, Mode::Train).unwrap();
        let teacher = build_model(&arch, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&path, &m, Some(&teacher), 42).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.iteration, 42);
        assert_eq!(back.student, m);
        assert_eq!(back.teacher.as_ref(), Some(&teacher));
        for d in DomainId::ALL {
            assert_eq!(back.student.predict(&x, d).unwrap(), m.predict(&x, d).unwrap());
        }
    }

    #[test]
    fn shared_kernels_are_stored_once() {
        let m = build_model(&Architecture::new(vec![4, 8], 2), 0).unwrap();
        let ck = Checkpoint::new(&m, None, 0).unwrap();
        assert!(ck.tensors.contains_key("enc.0.conv1.weight"));
        assert!(!ck.tensors.keys().any(|k| k.contains(".S.") && k.contains("conv")));
        assert!(ck.tensors.contains_key("dsbn.enc.0.norm1.S.gamma"));
        assert!(ck.tensors.contains_key("dsbn.enc.0.norm1.T.gamma"));
        assert!(ck.restore().unwrap().teacher.is_none());
    }

    #[test]
    fn missing_tensor_is_structural_error() {
        let m = build_model(&Architecture::new(vec![4, 8], 2), 0).unwrap();
        let mut ck = Checkpoint::new(&m, None, 0).unwrap();
        ck.tensors.remove("out.bias");
        assert!(matches!(ck.restore(), Err(Error::Structural(_))));
    }
}
