//! Teacher and student face networks.
//!
//! Both roles share the stream architecture without the attention module.
//! The teacher sees clean faces, the student degraded ones.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{Binder, EmbeddingGroups, NetConfig, StreamNet, StreamResult};
use crate::nn::ParamStore;
use crate::synth::hwc_to_chw;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceRole {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceNet {
    role: FaceRole,
    net: StreamNet,
    frozen: bool,
    pretrained: bool,
}

impl FaceNet {
    pub fn new(role: FaceRole, cfg: NetConfig, seed_value: u64) -> Result<Self> {
        if cfg.use_cam {
            return Err(Error::Config("face networks have no attention module".into()));
        }
        Ok(Self {
            role,
            net: StreamNet::new(cfg, seed_value)?,
            frozen: false,
            pretrained: false,
        })
    }

    /// Rebuild a teacher whose pretraining already happened.
    pub fn pretrained_teacher(cfg: NetConfig, params: ParamStore) -> Result<Self> {
        Ok(Self {
            role: FaceRole::Teacher,
            net: StreamNet::from_params(cfg, params)?,
            frozen: false,
            pretrained: true,
        })
    }

    pub fn from_params(role: FaceRole, cfg: NetConfig, params: ParamStore) -> Result<Self> {
        Ok(Self {
            role,
            net: StreamNet::from_params(cfg, params)?,
            frozen: false,
            pretrained: role == FaceRole::Teacher,
        })
    }

    pub fn role(&self) -> FaceRole {
        self.role
    }
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
    pub fn cfg(&self) -> &NetConfig {
        &self.net.cfg
    }
    pub fn params(&self) -> &ParamStore {
        &self.net.params
    }
    pub fn net(&self) -> &StreamNet {
        &self.net
    }

    /// Mutable access for the optimizer. A frozen network refuses.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::State("parameters of a frozen network cannot change".into()));
        }
        Ok(&mut self.net.params)
    }

    pub(crate) fn mark_pretrained(&mut self) {
        self.pretrained = true;
    }

    /// Graph binder; a frozen network binds constants, so no gradients exist for it.
    pub fn binder<'a>(&'a self, prefix: &'a str) -> Binder<'a> {
        Binder::new(&self.net.params, prefix, !self.frozen)
    }

    fn forward_one(&self, face: &Tensor) -> Result<EmbeddingGroups> {
        let [h, w] = self.net.cfg.input_dims;
        if face.shape() != [h, w, 3] {
            return shape_err(format!("face {:?} does not match configured {h}x{w}x3", face.shape()));
        }
        let chw = hwc_to_chw(face.data(), h, w);
        Ok(self.net.infer(&[&chw])?.remove(0).groups)
    }

    /// Teacher outputs on a clean `H × W × 3` face.
    pub fn teacher_forward(&self, face_clean: &Tensor) -> Result<EmbeddingGroups> {
        self.forward_one(face_clean)
    }

    /// Student outputs on a degraded `H × W × 3` face.
    pub fn student_forward(&self, face_degraded: &Tensor) -> Result<EmbeddingGroups> {
        self.forward_one(face_degraded)
    }

    /// Batched inference over CHW faces.
    pub fn infer(&self, faces: &[&Tensor]) -> Result<Vec<StreamResult>> {
        self.net.infer(faces)
    }
}

/// Fix the teacher's parameters for the rest of its life.
pub fn freeze_teacher(mut teacher: FaceNet) -> Result<FaceNet> {
    if teacher.role != FaceRole::Teacher {
        return Err(Error::State("only a teacher network can be frozen".into()));
    }
    if !teacher.pretrained {
        return Err(Error::State("teacher must be pretrained before freezing".into()));
    }
    teacher.frozen = true;
    Ok(teacher)
}

/// Per-index group alignment between student and teacher outputs.
pub fn check_alignment(student: &NetConfig, teacher: &NetConfig) -> Result<()> {
    if student.num_classes != teacher.num_classes || student.embed_dim != teacher.embed_dim {
        return Err(Error::Config(format!(
            "student groups ({} classes, dim {}) do not align with teacher groups ({} classes, dim {})",
            student.num_classes, student.embed_dim, teacher.num_classes, teacher.embed_dim
        )));
    }
    if student.input_dims != teacher.input_dims {
        return Err(Error::Config(format!(
            "student face dims {:?} differ from teacher {:?}",
            student.input_dims, teacher.input_dims
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    fn cfg() -> NetConfig {
        NetConfig {
            input_dims: [16, 16],
            channels: [8, 16, 16],
            embed_dim: 64,
            num_classes: 10,
            use_cam: false,
        }
    }

    #[test]
    fn group_contract() {
        let t = FaceNet::new(FaceRole::Teacher, cfg(), 1).unwrap();
        let s = FaceNet::new(FaceRole::Student, cfg(), 2).unwrap();
        let face = Tensor::full(&[16, 16, 3], 0.4);
        let a = t.teacher_forward(&face).unwrap();
        let b = s.student_forward(&face).unwrap();
        assert_eq!(a.logits.len(), 4);
        assert_eq!(a.logits.len(), b.logits.len());
        assert!(a.logits.iter().all(|l| l.len() == 10));
        assert!(a.features.iter().all(|f| f.len() == 64));
        assert_eq!(b, s.student_forward(&face).unwrap());
        assert!(t.teacher_forward(&Tensor::zeros(&[8, 8, 3])).is_err());
    }

    #[test]
    fn freezing_rules() {
        let t = FaceNet::new(FaceRole::Teacher, cfg(), 1).unwrap();
        assert!(matches!(freeze_teacher(t.clone()), Err(Error::State(_))));
        let s = FaceNet::new(FaceRole::Student, cfg(), 1).unwrap();
        assert!(matches!(freeze_teacher(s), Err(Error::State(_))));
        let mut pre = t;
        pre.mark_pretrained();
        let mut frozen = freeze_teacher(pre).unwrap();
        assert!(frozen.is_frozen());
        assert!(frozen.params_mut().is_err());
    }

    #[test]
    fn frozen_teacher_has_no_gradients() {
        let mut t = FaceNet::new(FaceRole::Teacher, cfg(), 1).unwrap();
        t.mark_pretrained();
        let t = freeze_teacher(t).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 3, 16, 16], 0.3));
        let o = crate::model::stream_forward(&mut g, &t.binder("teacher."), t.cfg(), x).unwrap();
        let l = g.value(o.logits[0]).clone();
        let root = g.scalar(l.data().iter().sum(), vec![(o.logits[0], Tensor::full(l.shape(), 1.0))]).unwrap();
        let grads = g.backward(root).by_param(&g);
        assert!(grads.is_empty());
    }

    #[test]
    fn misaligned_groups_are_config_errors() {
        let mut other = cfg();
        other.num_classes = 11;
        assert!(matches!(check_alignment(&cfg(), &other), Err(Error::Config(_))));
        assert!(check_alignment(&cfg(), &cfg()).is_ok());
    }
}
