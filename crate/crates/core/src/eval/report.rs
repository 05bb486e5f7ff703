use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::protocol::{ModelResult, ProtocolRun};

/// One model under one condition for one repetition seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub situation: String,
    /// Sweep axis name, or `headline` outside sweeps.
    pub axis: String,
    pub value: f64,
    pub clean_accuracy: f64,
    pub accuracy: f64,
    pub f1: [f64; 4],
    pub macro_f1: f64,
    pub drop_percent: f64,
    pub samples: u64,
    pub manifest_id: String,
    pub model_id: String,
}

impl ResultRow {
    pub fn new(r: &ModelResult, seed: u64, situation: &str, axis: &str, value: f64) -> Self {
        Self {
            method: r.method.tag().to_string(),
            seed,
            situation: situation.to_string(),
            axis: axis.to_string(),
            value,
            clean_accuracy: r.clean.accuracy,
            accuracy: r.adversarial.accuracy,
            f1: r.adversarial.f1,
            macro_f1: r.adversarial.macro_f1,
            drop_percent: r.drop_percent,
            samples: r.adversarial.samples,
            manifest_id: r.manifest_id.clone(),
            model_id: r.model_id.clone(),
        }
    }

    pub fn from_run(run: &ProtocolRun, seed: u64, axis: &str, value: f64) -> Vec<Self> {
        run.results
            .iter()
            .map(|r| Self::new(r, seed, run.situation.name(), axis, value))
            .collect()
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(
        "method,seed,situation,axis,value,clean_accuracy,accuracy,f1_n,f1_a,f1_o,f1_p,macro_f1,drop_percent,samples,manifest_id,model_id\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.seed,
            r.situation,
            r.axis,
            r.value,
            r.clean_accuracy,
            r.accuracy,
            r.f1[0],
            r.f1[1],
            r.f1[2],
            r.f1[3],
            r.macro_f1,
            r.drop_percent,
            r.samples,
            r.manifest_id,
            r.model_id
        ));
    }
    s
}

/// Mean and sample standard deviation over repetition seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub situation: String,
    pub axis: String,
    pub value: f64,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub drop_mean: f64,
    pub drop_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by (method, situation, axis, value), in first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String, u64), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.method.clone(), r.situation.clone(), r.axis.clone(), r.value.to_bits());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let pick = |f: fn(&ResultRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (accuracy_mean, accuracy_std) = mean_std(&pick(|r| r.accuracy));
            let (macro_f1_mean, macro_f1_std) = mean_std(&pick(|r| r.macro_f1));
            let (drop_mean, drop_std) = mean_std(&pick(|r| r.drop_percent));
            SummaryRow {
                method: key.0,
                situation: key.1,
                axis: key.2,
                value: f64::from_bits(key.3),
                runs: g.len(),
                accuracy_mean,
                accuracy_std,
                macro_f1_mean,
                macro_f1_std,
                drop_mean,
                drop_std,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, acc: f64) -> ResultRow {
        ResultRow {
            method: method.into(),
            seed: 0,
            situation: "I".into(),
            axis: "headline".into(),
            value: 0.0,
            clean_accuracy: 1.0,
            accuracy: acc,
            f1: [acc; 4],
            macro_f1: acc,
            drop_percent: (1.0 - acc) * 100.0,
            samples: 10,
            manifest_id: "m".into(),
            model_id: "x".into(),
        }
    }

    #[test]
    fn summary_groups_and_averages() {
        let rows = vec![row("adt", 0.8), row("none", 0.3), row("adt", 0.9), row("adt", 1.0)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].method, "adt");
        assert_eq!(s[0].runs, 3);
        assert!((s[0].accuracy_mean - 0.9).abs() < 1e-12);
        assert!((s[0].accuracy_std - 0.1).abs() < 1e-12);
        assert_eq!(s[1].accuracy_std, 0.0);
        let csv = results_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().all(|l| l.split(',').count() == 16));
    }
}
