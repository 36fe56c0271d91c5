use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::write_atomic;
use crate::error::Result;

use super::attention::LocalizationReport;
use super::metrics::ClusterReport;
use super::probe::{ClassificationReport, FinetuneReport};

/// Human-readable rendering of a report.
pub trait ReportText {
    fn task(&self) -> &'static str;
    fn definition(&self) -> String;
    fn table(&self) -> String;
}

impl ReportText for ClusterReport {
    fn task(&self) -> &'static str {
        "cluster"
    }
    fn definition(&self) -> String {
        self.definition.clone()
    }
    fn table(&self) -> String {
        let mut s = format!("intra\t{}\ninter\t{}\nratio\t{:.6}\n\nclass\tcount\tintra\n", self.intra, self.inter, self.inter_intra_ratio());
        for ((c, n), d) in self.classes.iter().zip(&self.counts).zip(&self.per_class_intra) {
            let _ = writeln!(s, "{c}\t{n}\t{d:.6}");
        }
        s
    }
}

fn fold_table(r: &ClassificationReport) -> String {
    let mut s = format!("auc\t{:.6}\nap50\t{:.4}\nar50\t{:.4}\n\nfold\ttrain\ttest\tauc\tap50\tar50\tno_pos\n", r.auc, r.ap50, r.ar50);
    for f in &r.folds {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.6}\t{:.4}\t{:.4}\t{}",
            f.fold, f.n_train, f.n_test, f.auc, f.ap50, f.ar50, f.no_positive_predictions
        );
    }
    for k in &r.skipped {
        let _ = writeln!(s, "{}\tskipped: {}", k.fold, k.reason);
    }
    s
}

impl ReportText for ClassificationReport {
    fn task(&self) -> &'static str {
        "probe"
    }
    fn definition(&self) -> String {
        self.definition.clone()
    }
    fn table(&self) -> String {
        fold_table(self)
    }
}

impl ReportText for FinetuneReport {
    fn task(&self) -> &'static str {
        "finetune"
    }
    fn definition(&self) -> String {
        self.metrics.definition.clone()
    }
    fn table(&self) -> String {
        let mut s = fold_table(&self.metrics);
        s.push_str("\nstep\tloss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{l:.6}");
        }
        s
    }
}

impl ReportText for LocalizationReport {
    fn task(&self) -> &'static str {
        "localize"
    }
    fn definition(&self) -> String {
        self.definition.clone()
    }
    fn table(&self) -> String {
        let mut s = format!("percentile\t{}\ndsc\t{}\n\ncase\tdsc\tthreshold\tpredicted\troi\n", self.percentile, self.dsc);
        for (i, c) in self.cases.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{:.6}\t{:.6}\t{}\t{}", c.dsc, c.threshold, c.predicted_voxels, c.roi_voxels);
        }
        s
    }
}

/// Writes `<stem>.json` and `<stem>.txt` into `dir`. Both carry the
/// metric definitions and run parameters; neither carries timestamps, so
/// identical runs give identical bytes.
pub fn write_report<R: Serialize + ReportText>(dir: &Path, stem: &str, params: &Value, report: &R) -> Result<Vec<PathBuf>> {
    let doc = json!({
        "task": report.task(),
        "definition": report.definition(),
        "parameters": params,
        "result": report,
    });
    let json_path = dir.join(format!("{stem}.json"));
    let mut bytes = serde_json::to_vec_pretty(&doc).expect("report serializes");
    bytes.push(b'\n');
    write_atomic(&json_path, &bytes)?;

    let mut text = format!("# task: {}\n# definition: {}\n", report.task(), report.definition());
    if let Value::Object(m) = params {
        for (k, v) in m {
            let _ = writeln!(text, "# {k}: {v}");
        }
    }
    text.push('\n');
    text.push_str(&report.table());
    let txt_path = dir.join(format!("{stem}.txt"));
    write_atomic(&txt_path, text.as_bytes())?;
    Ok(vec![json_path, txt_path])
}
