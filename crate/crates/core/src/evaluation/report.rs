//! Per-clip metric rows and their aggregates, as JSON and CSV.

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEval {
    pub clip: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lve: Option<f64>,
    /// Mean CR over this clip's fine conditions.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cr: Option<f64>,
    #[serde(default)]
    pub cr_conditions: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_emotion: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predicted_emotion: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub clips: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lve: Option<f64>,
    /// Mean over all fine conditions of all clips.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diversity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipEval>,
    pub aggregate: Aggregate,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    pub fn new(clips: Vec<ClipEval>, diversity: Option<f64>) -> Self {
        let lve = mean(clips.iter().filter_map(|c| c.lve));
        let n_cond: usize = clips.iter().filter(|c| c.cr.is_some()).map(|c| c.cr_conditions).sum();
        let cr = (n_cond > 0).then(|| {
            clips.iter().filter_map(|c| c.cr.map(|v| v * c.cr_conditions as f64)).sum::<f64>() / n_cond as f64
        });
        let accuracy = mean(clips.iter().filter_map(|c| match (c.target_emotion, c.predicted_emotion) {
            (Some(t), Some(p)) => Some(if t == p { 1.0 } else { 0.0 }),
            _ => None,
        }));
        let aggregate = Aggregate { clips: clips.len(), lve, cr, accuracy, diversity };
        Self { clips, aggregate }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_default();
        let optu = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from("clip,lve,cr,cr_conditions,target_emotion,predicted_emotion\n");
        for c in &self.clips {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.clip,
                opt(c.lve),
                opt(c.cr),
                c.cr_conditions,
                optu(c.target_emotion),
                optu(c.predicted_emotion)
            ));
        }
        s
    }
}
