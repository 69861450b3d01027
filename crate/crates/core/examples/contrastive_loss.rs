//! Evaluates the adaptive contrastive loss on a hand-made batch and shows
//! how the distance weights change it. Negatives close to the anchor in
//! `h` get weight near one; distant ones are discounted.

use ced::losses::{adaptive_contrastive_loss_with_grad, pair_weight, ContrastiveAnchor, ContrastiveBatchView};
use ced::synth_data::Sentiment;

fn unit(v: [f64; 2]) -> Vec<f64> {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    vec![v[0] / n, v[1] / n]
}

fn main() -> ced::Result<()> {
    let anchor = |id, label, h: [f64; 2], z: [f64; 2]| ContrastiveAnchor {
        h: h.to_vec(),
        z: unit(z),
        label,
        sample_id: id,
    };
    let anchors = vec![
        anchor(0, Sentiment::Positive, [0.0, 0.0], [1.0, 0.1]),
        anchor(1, Sentiment::Positive, [0.2, 0.1], [0.9, 0.3]),
        anchor(2, Sentiment::Negative, [0.1, 0.0], [0.2, 1.0]),
        anchor(3, Sentiment::Negative, [3.0, 2.0], [0.8, 0.4]),
    ];
    for n in 2..4 {
        println!(
            "weight of negative {n} for anchor 0: {:.4}",
            pair_weight(&anchors[0].h, &anchors[n].h)?
        );
    }

    let mut view = ContrastiveBatchView::new(anchors, 0.07);
    let adaptive = adaptive_contrastive_loss_with_grad(&view)?;
    view.uniform_weights = true;
    let uniform = adaptive_contrastive_loss_with_grad(&view)?;
    view.uniform_weights = false;
    view.denominator_includes_positive = true;
    let with_positive = adaptive_contrastive_loss_with_grad(&view)?;

    println!("adaptive weights       {:>9.4}", adaptive.loss);
    println!("uniform weights        {:>9.4}", uniform.loss);
    println!("positive in denominator{:>9.4}", with_positive.loss);
    println!("d loss / d h of anchor 0 (adaptive): {:?}", adaptive.grad_h[0]);
    Ok(())
}
