//! CSV and text renderings of evaluation results. Formatting is plain `{}`
//! Display (shortest round-trip floats), so identical runs serialize to
//! identical bytes.

use super::{LatencyReport, MaskComparison, MetricsReport, SweepTable};

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("traj_index,agent_id,best_ade,best_fde,cv_ade,cv_fde\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.index, r.agent_id, r.best_ade, r.best_fde, r.cv_ade, r.cv_fde
        ));
    }
    out.push_str(&format!(
        "mean,,{},{},{},{}\n",
        report.mean_ade, report.mean_fde, report.mean_cv_ade, report.mean_cv_fde
    ));
    out
}

pub fn metrics_summary(report: &MetricsReport) -> String {
    format!(
        "trajectories: {}\nbest-of-{} ADE: {:.6}\nbest-of-{} FDE: {:.6}\n\
         constant-velocity ADE: {:.6}\nconstant-velocity FDE: {:.6}\nconfig: {}\n",
        report.rows.len(),
        report.k_samples,
        report.mean_ade,
        report.k_samples,
        report.mean_fde,
        report.mean_cv_ade,
        report.mean_cv_fde,
        report.config_echo
    )
}

pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out =
        String::from("theta,storage_bytes,recon_ade,pred_ade,pred_fde,utilization,perplexity\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.theta, r.storage_bytes, r.recon_ade, r.pred_ade, r.pred_fde, r.utilization,
            r.perplexity
        ));
    }
    out
}

pub fn masks_csv(cmp: &MaskComparison) -> String {
    let mut out = String::from(
        "mask,iterations_to_convergence,total_steps,final_val_loss,ade,fde\n",
    );
    for row in [&cmp.semi_causal, &cmp.causal] {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.kind.name(),
            row.convergence_step.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
            row.total_steps,
            row.final_val_loss,
            row.ade,
            row.fde
        ));
    }
    out
}

pub fn latency_text(report: &LatencyReport) -> String {
    format!(
        "trials: {} (single prediction, k={})\nmean: {:.4} ms\np50:  {:.4} ms\np95:  {:.4} ms\n\
         hardware: {}\nmodel: {}\n",
        report.n_trials,
        report.k_samples,
        report.mean_ms,
        report.p50_ms,
        report.p95_ms,
        report.hardware,
        report.model_note
    )
}
