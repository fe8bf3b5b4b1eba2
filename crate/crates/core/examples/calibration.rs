//! Calibration of an overconfident predictor: ECE, NLL and the reliability
//! rows written to CSV.

use amd_distill::metrics::{calibration, reliability_diagram, write_reliability_csv};

fn main() -> amd_distill::Result<()> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..100 {
        let conf = 0.55 + 0.4 * (i % 10) as f64 / 10.0;
        probs.push(vec![conf, 1.0 - conf]);
        // Right about 70% of the time whatever the confidence.
        labels.push(usize::from((i / 10) % 10 >= 7));
    }
    let report = calibration(&probs, &labels, 15)?;
    println!("accuracy {:.3}  ECE {:.2}%  NLL {:.4}", report.accuracy, report.ece_percent, report.nll);
    let rows = reliability_diagram(&report);
    for r in rows.iter().filter(|r| r.count > 0) {
        println!("  bin {:>2} [{:.3}, {:.3}]  conf {:.3}  acc {:.3}  n {}", r.bin, r.lower, r.upper, r.confidence, r.accuracy, r.count);
    }
    let path = std::env::temp_dir().join("reliability.csv");
    write_reliability_csv(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}
