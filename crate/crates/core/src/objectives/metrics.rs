use serde::{Deserialize, Serialize};

use super::ObjectiveError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    /// `2TP/(2TP+FP+FN)`, 0 without support.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    fn add(&mut self, o: &ClassCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    fn tally(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }
}

/// Pixel confusion counts. Damage counts cover ground-truth building pixels
/// only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
    /// Building vs background derived from the damage masks.
    pub seg: ClassCounts,
    /// Building vs background from a dedicated segmentation output.
    pub seg_head: ClassCounts,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            classes: vec![ClassCounts::default(); num_classes],
            seg: ClassCounts::default(),
            seg_head: ClassCounts::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.classes.len(), other.classes.len(), "class count mismatch");
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.add(b);
        }
        self.seg.add(&other.seg);
        self.seg_head.add(&other.seg_head);
    }

    /// Adds one aligned set of class masks. `building` selects the pixels
    /// that contribute to the damage counts.
    pub fn accumulate(&mut self, pred: &[usize], truth: &[usize], building: &[bool]) -> Result<(), ObjectiveError> {
        if pred.len() != truth.len() || pred.len() != building.len() {
            return Err(ObjectiveError::ShapeMismatch(format!(
                "pred {} / truth {} / building {} pixels",
                pred.len(),
                truth.len(),
                building.len()
            )));
        }
        let classes = self.classes.len();
        if let Some(&class) = pred.iter().chain(truth).find(|&&c| c >= classes) {
            return Err(ObjectiveError::ClassOutOfRange { class, classes });
        }
        for ((&p, &t), &fg) in pred.iter().zip(truth).zip(building) {
            self.seg.tally(p != 0, t != 0);
            if !fg {
                continue;
            }
            if p == t {
                self.classes[p].tp += 1;
            } else {
                self.classes[p].fp += 1;
                self.classes[t].fn_ += 1;
            }
        }
        Ok(())
    }

    /// Adds building/background predictions from a segmentation output.
    pub fn accumulate_segmentation(&mut self, pred: &[bool], truth: &[bool]) -> Result<(), ObjectiveError> {
        if pred.len() != truth.len() {
            return Err(ObjectiveError::ShapeMismatch(format!(
                "pred {} / truth {} pixels",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.seg_head.tally(p, t);
        }
        Ok(())
    }
}

pub fn f1_seg(counts: &ConfusionCounts) -> f64 {
    counts.seg.f1()
}

pub fn f1_class(counts: &ConfusionCounts, class: usize) -> f64 {
    counts.classes[class].f1()
}

/// Harmonic mean of the foreground class scores,
/// `K / Σ_{c=1..K} (F1_c + ε)⁻¹`, capped at 1.
pub fn f1_damage(counts: &ConfusionCounts, epsilon: f64) -> f64 {
    f1_damage_from(&(1..counts.num_classes()).map(|c| f1_class(counts, c)).collect::<Vec<_>>(), epsilon)
}

pub(crate) fn f1_damage_from(class_f1: &[f64], epsilon: f64) -> f64 {
    let k = class_f1.len() as f64;
    (k / class_f1.iter().map(|f| 1.0 / (f + epsilon)).sum::<f64>()).min(1.0)
}

/// One evaluation's scores and counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1_damage: f64,
    pub f1_seg: f64,
    /// Absent for variants without a segmentation output.
    pub f1_seg_head: Option<f64>,
    /// Indexed by class, background included.
    pub f1_classes: Vec<f64>,
    pub epsilon: f64,
    pub counts: ConfusionCounts,
}

impl MetricReport {
    pub fn from_counts(counts: &ConfusionCounts, epsilon: f64, has_seg_head: bool) -> Self {
        Self {
            f1_damage: f1_damage(counts, epsilon),
            f1_seg: f1_seg(counts),
            f1_seg_head: has_seg_head.then(|| counts.seg_head.f1()),
            f1_classes: (0..counts.num_classes()).map(|c| f1_class(counts, c)).collect(),
            epsilon,
            counts: counts.clone(),
        }
    }

    /// Human-readable `key=value` lines.
    pub fn to_kv_lines(&self) -> String {
        let mut out = format!("f1_damage={:.6}\nf1_seg={:.6}\n", self.f1_damage, self.f1_seg);
        if let Some(f) = self.f1_seg_head {
            out += &format!("f1_seg_head={f:.6}\n");
        }
        for (c, f) in self.f1_classes.iter().enumerate() {
            out += &format!("f1_class_{c}={f:.6}\n");
        }
        for (c, k) in self.counts.classes.iter().enumerate() {
            out += &format!("class_{c}_tp={}\nclass_{c}_fp={}\nclass_{c}_fn={}\n", k.tp, k.fp, k.fn_);
        }
        let s = &self.counts.seg;
        out += &format!("seg_tp={}\nseg_fp={}\nseg_fn={}\n", s.tp, s.fp, s.fn_);
        if self.f1_seg_head.is_some() {
            let h = &self.counts.seg_head;
            out += &format!("seg_head_tp={}\nseg_head_fp={}\nseg_head_fn={}\n", h.tp, h.fp, h.fn_);
        }
        out
    }

    /// Single-line JSON record.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}
