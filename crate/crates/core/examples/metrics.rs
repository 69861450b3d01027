//! Accuracy, per-class scores and macro-F1 from a confusion matrix, and
//! the paired sign test used to compare runs across seeds.

use ced::synth_data::Sentiment::{self, Negative as N, Neutral as U, Positive as P};
use ced::training::{sign_test, Metrics};

fn main() -> ced::Result<()> {
    let labels = [N, N, N, U, U, P, P, P, P, U];
    let predicted = [N, U, N, U, P, P, P, N, P, U];
    let m = Metrics::from_predictions(&labels, &predicted)?;
    println!("accuracy {:.4}  macro-F1 {:.4}", m.accuracy, m.macro_f1);
    println!("confusion (rows true, columns predicted):");
    for (row, label) in m.confusion.iter().zip(Sentiment::ALL) {
        println!("  {:<8} {:?}", label.as_str(), row);
    }
    for (c, label) in m.per_class.iter().zip(Sentiment::ALL) {
        println!("  {:<8} precision {:.3} recall {:.3} f1 {:.3}", label.as_str(), c.precision, c.recall, c.f1);
    }

    let full = [0.91, 0.88, 0.93, 0.90, 0.92];
    let ablated = [0.85, 0.88, 0.90, 0.84, 0.89];
    let (wins, losses, p) = sign_test(&full, &ablated)?;
    println!("sign test: {wins} wins, {losses} losses, one-sided p = {p:.4}");
    Ok(())
}
