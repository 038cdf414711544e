//! In-memory image/label pairs grouped into splits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LabelVolume;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One single-channel image `(1, D, H, W)` with its congruent labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub name: String,
    pub image: Tensor<f32>,
    pub labels: LabelVolume,
}

impl Subject {
    pub fn new(name: impl Into<String>, image: Tensor<f32>, labels: LabelVolume) -> Result<Self> {
        let spatial = image.spatial()?;
        if image.channels() != 1 || spatial != labels.dims() {
            return Err(Error::ShapeMismatch {
                op: "subject",
                left: image.dims().to_vec(),
                right: labels.dims().to_vec(),
            });
        }
        Ok(Subject {
            name: name.into(),
            image,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.labels.dims()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<Subject>,
    pub validation: Vec<Subject>,
    pub test: Vec<Subject>,
}

impl Dataset {
    pub fn new(num_classes: usize) -> Self {
        Dataset {
            num_classes,
            ..Default::default()
        }
    }

    pub fn push(&mut self, split: Split, subject: Subject) -> Result<()> {
        if subject.labels.num_classes() != self.num_classes {
            return Err(Error::Dataset(format!(
                "{} has {} classes, dataset has {}",
                subject.name,
                subject.labels.num_classes(),
                self.num_classes
            )));
        }
        self.split_mut(split).push(subject);
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[Subject] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Subject> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }
}
