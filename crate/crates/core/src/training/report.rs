use std::fmt::Write;

use super::runstore::{RunRecord, SplitMetrics};

const HEADER: &str =
    "| Model | Accuracy | AUC | Loss | Precision | Recall |\n|---|---|---|---|---|---|\n";

fn row(out: &mut String, name: &str, m: &SplitMetrics) {
    writeln!(
        out,
        "| {name} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
        m.accuracy, m.auc, m.loss, m.precision, m.recall
    )
    .unwrap();
}

/// Markdown summary of each run's best epoch: a training table followed by
/// a validation table. Runs without a best epoch are listed as `n/a`.
pub fn markdown_report(runs: &[(&str, &RunRecord)]) -> String {
    let mut out = String::new();
    for (title, val) in [
        ("Performance Metrics on Training Set", false),
        ("Performance Metrics on Validation Set", true),
    ] {
        writeln!(out, "### {title}\n").unwrap();
        out.push_str(HEADER);
        for (name, run) in runs {
            match run.best() {
                Some(e) => row(&mut out, name, if val { &e.val } else { &e.train }),
                None => writeln!(out, "| {name} | n/a | n/a | n/a | n/a | n/a |").unwrap(),
            }
        }
        out.push('\n');
    }
    out
}
