use serde::{Deserialize, Serialize};

use crate::encoders::CLS_ID;
use crate::error::{CedError, Result};
use crate::synth_data::{CorpusSpec, Sentiment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordClass {
    Cls,
    /// Determines the label of the sentence it appears in.
    Causal(Sentiment),
    /// Co-occurs with the given label more often than chance, but has no
    /// effect on the true label.
    Biased(Sentiment),
    Filler,
}

/// Vocabulary partitioned into causal sentiment words, biased context
/// words and neutral fillers, with synonym groups over the non-causal
/// words.
///
/// Biased synonym groups deliberately span association classes: group `k`
/// is `{biased_neg_k, biased_neu_k, biased_pos_k}`. Swapping a word for its
/// synonym therefore keeps the sentence's meaning but moves it to a word
/// with a different label association.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentLexicon {
    pub words: Vec<String>,
    pub classes: Vec<WordClass>,
    pub synonym_groups: Vec<Vec<usize>>,
    /// Designed label shares `[neg, neu, pos]` for each biased word id.
    pub biased_label_rates: Vec<(usize, [f64; 3])>,
}

impl SentimentLexicon {
    pub fn build(spec: &CorpusSpec) -> Self {
        let mut words = vec!["[CLS]".to_string()];
        let mut classes = vec![WordClass::Cls];
        for label in [Sentiment::Negative, Sentiment::Positive] {
            for k in 0..spec.causal_per_polarity {
                words.push(format!("{}{k:02}", label.short()));
                classes.push(WordClass::Causal(label));
            }
        }
        let mut synonym_groups = Vec::new();
        let mut biased_label_rates = Vec::new();
        for k in 0..spec.biased_per_label {
            let mut group = Vec::new();
            for label in Sentiment::ALL {
                let id = words.len();
                words.push(format!("b{}{k:02}", label.short()));
                classes.push(WordClass::Biased(label));
                group.push(id);
                biased_label_rates.push((id, spec.designed_label_shares(label)));
            }
            synonym_groups.push(group);
        }
        let first_filler = words.len();
        for k in 0..spec.filler_words {
            words.push(format!("w{k:02}"));
            classes.push(WordClass::Filler);
        }
        let fillers: Vec<usize> = (first_filler..words.len()).collect();
        for chunk in fillers.chunks(3) {
            synonym_groups.push(chunk.to_vec());
        }
        SentimentLexicon {
            words,
            classes,
            synonym_groups,
            biased_label_rates,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn class_of(&self, id: usize) -> Option<WordClass> {
        self.classes.get(id).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    fn ids_where(&self, pred: impl Fn(WordClass) -> bool) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&i| pred(self.classes[i]))
            .collect()
    }

    pub fn causal_words(&self, label: Sentiment) -> Vec<usize> {
        self.ids_where(|c| c == WordClass::Causal(label))
    }

    pub fn biased_words(&self, label: Sentiment) -> Vec<usize> {
        self.ids_where(|c| c == WordClass::Biased(label))
    }

    pub fn all_biased_words(&self) -> Vec<usize> {
        self.ids_where(|c| matches!(c, WordClass::Biased(_)))
    }

    pub fn fillers(&self) -> Vec<usize> {
        self.ids_where(|c| c == WordClass::Filler)
    }

    pub fn is_causal(&self, id: usize) -> bool {
        matches!(self.class_of(id), Some(WordClass::Causal(_)))
    }

    pub fn is_biased(&self, id: usize) -> bool {
        matches!(self.class_of(id), Some(WordClass::Biased(_)))
    }

    pub fn synonym_group(&self, id: usize) -> Option<&[usize]> {
        self.synonym_groups
            .iter()
            .find(|g| g.contains(&id))
            .map(Vec::as_slice)
    }

    /// Checks the partition invariants: each id has exactly one class, the
    /// CLS id is reserved, and every synonym group lies inside one of the
    /// biased or filler sets.
    pub fn validate(&self) -> Result<()> {
        if self.words.len() != self.classes.len() {
            return Err(CedError::Data("lexicon words and classes differ in length".into()));
        }
        if self.classes.get(CLS_ID) != Some(&WordClass::Cls)
            || self.classes.iter().filter(|&&c| c == WordClass::Cls).count() != 1
        {
            return Err(CedError::Data("lexicon must reserve exactly id 0 for CLS".into()));
        }
        let mut seen = vec![false; self.words.len()];
        for group in &self.synonym_groups {
            let kind = |id: usize| match self.classes.get(id) {
                Some(WordClass::Biased(_)) => Some(1),
                Some(WordClass::Filler) => Some(2),
                _ => None,
            };
            let first = group.first().and_then(|&id| kind(id));
            if first.is_none() || group.iter().any(|&id| kind(id) != first) {
                return Err(CedError::Data(format!(
                    "synonym group {group:?} mixes word classes"
                )));
            }
            for &id in group {
                if std::mem::replace(&mut seen[id], true) {
                    return Err(CedError::Data(format!("word {id} in two synonym groups")));
                }
            }
        }
        Ok(())
    }
}
