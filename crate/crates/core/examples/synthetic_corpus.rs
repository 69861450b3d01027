//! Generates the default biased corpus and prints how strongly the planted
//! shortcut words lean toward one label, in training and in the
//! anti-biased test split.

use ced::synth_data::{bias_cooccurrence_report, generate_corpus, CorpusSpec, Sentiment};

fn main() -> ced::Result<()> {
    let spec = CorpusSpec::default();
    let bundle = generate_corpus(&spec)?;
    let lex = &bundle.lexicon;
    println!(
        "{} words; splits {}/{}/{}/{}",
        lex.vocab_size(),
        bundle.train.len(),
        bundle.validation.len(),
        bundle.test_biased.len(),
        bundle.test_anti_biased.len()
    );

    let train = bias_cooccurrence_report(&bundle.train)?;
    let anti = bias_cooccurrence_report(&bundle.test_anti_biased)?;
    println!("\nword      train share  dominant   anti-biased dominant");
    for label in Sentiment::ALL {
        for &w in lex.biased_words(label).iter().take(3) {
            let (t, a) = (train.row(w).unwrap(), anti.row(w).unwrap());
            println!("{:<9} {:>11.3}  {:<10} {}", lex.word(w), t.skew, t.dominant().as_str(), a.dominant().as_str());
        }
    }

    let s = &bundle.train[0];
    let words: Vec<&str> = s.tokens().iter().map(|&t| lex.word(t)).collect();
    println!("\nfirst training sample ({}): {}", s.label, words.join(" "));
    Ok(())
}
