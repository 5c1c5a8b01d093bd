//! Report emission: the per-epoch CSV with fixed columns and the JSON twin.
//! Human-facing floats print with 9 significant digits so golden files stay
//! reproducible; the JSON files keep full round-trip precision.

use std::io::Write;
use std::path::Path;

use optperf_core::EpochReport;

/// 9-significant-digit scientific notation.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Fixed CSV schema:
/// `epoch,chosen_B,b_0..b_{n-1},predicted_T,realized_T_mean,b_noise,efficiency,goodput,scenario`
pub fn epochs_csv(reports: &[EpochReport]) -> String {
    let n = reports.first().map_or(0, |r| r.allocation.len());
    let mut out = String::from("epoch,chosen_B");
    for i in 0..n {
        out.push_str(&format!(",b_{i}"));
    }
    out.push_str(",predicted_T,realized_T_mean,b_noise,efficiency,goodput,scenario\n");
    for r in reports {
        out.push_str(&format!("{},{}", r.epoch, r.chosen_batch));
        for &b in &r.allocation {
            out.push_str(&format!(",{b}"));
        }
        let predicted = r.predicted_time.map(sig9).unwrap_or_default();
        out.push_str(&format!(
            ",{},{},{},{},{},{}\n",
            predicted,
            sig9(r.realized_mean_time),
            sig9(r.b_noise),
            sig9(r.efficiency),
            sig9(r.goodput),
            r.phase,
        ));
    }
    out
}

/// Write `epochs.csv` and `epochs.json` into `dir`.
pub fn write_reports(dir: &Path, reports: &[EpochReport]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = std::fs::File::create(dir.join("epochs.csv"))?;
    csv.write_all(epochs_csv(reports).as_bytes())?;
    let mut json = std::fs::File::create(dir.join("epochs.json"))?;
    serde_json::to_writer_pretty(&mut json, reports)?;
    json.write_all(b"\n")?;
    Ok(())
}

/// Human-readable per-epoch summary table.
pub fn summary_table(reports: &[EpochReport]) -> String {
    let mut out = String::new();
    out.push_str(
        "epoch  chosen_B  predicted_T    realized_T     b_noise        goodput        scenario\n",
    );
    for r in reports {
        let predicted = r
            .predicted_time
            .map(sig9)
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{:<6} {:<9} {:<14} {:<14} {:<14} {:<14} {}\n",
            r.epoch,
            r.chosen_batch,
            predicted,
            sig9(r.realized_mean_time),
            sig9(r.b_noise),
            sig9(r.goodput),
            r.phase,
        ));
    }
    out
}
