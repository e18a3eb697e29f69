//! Per-category model selection.
//!
//! Category-wise decoding runs each category through its own specialized
//! model: a low-rank-adapted transformer or a per-category table set. The
//! default policy passes categories without a registered override through
//! to the base model; strict mode turns that into an error for tests.

use std::collections::BTreeMap;

use crate::report::Category;

use super::{apply_lora, ConditionalLm, LoraDelta, ModelError, ToyTransformer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingAdapterPolicy {
    PassThrough,
    Strict,
}

/// Base model plus per-category overrides.
#[derive(Debug, Clone)]
pub struct CategoryModels<M> {
    base: M,
    overrides: BTreeMap<Category, M>,
    policy: MissingAdapterPolicy,
}

impl<M: ConditionalLm> CategoryModels<M> {
    pub fn new(base: M, policy: MissingAdapterPolicy) -> Self {
        Self {
            base,
            overrides: BTreeMap::new(),
            policy,
        }
    }

    pub fn insert(&mut self, category: Category, model: M) {
        self.overrides.insert(category, model);
    }

    pub fn base(&self) -> &M {
        &self.base
    }

    pub fn has_override(&self, category: Category) -> bool {
        self.overrides.contains_key(&category)
    }

    /// The model that decodes `category`.
    pub fn model_for(&self, category: Category) -> Result<&M, ModelError> {
        match self.overrides.get(&category) {
            Some(m) => Ok(m),
            None => match self.policy {
                MissingAdapterPolicy::PassThrough => Ok(&self.base),
                MissingAdapterPolicy::Strict => Err(ModelError::MissingAdapter(category)),
            },
        }
    }
}

impl CategoryModels<ToyTransformer> {
    /// Builds category models by applying each adapter delta to the base.
    pub fn from_adapters(
        base: ToyTransformer,
        adapters: &BTreeMap<Category, LoraDelta>,
        policy: MissingAdapterPolicy,
    ) -> Result<Self, ModelError> {
        let mut set = Self::new(base, policy);
        for (&category, delta) in adapters {
            let adapted = apply_lora(&set.base, delta)?;
            set.insert(category, adapted);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VisualTokens;
    use crate::vocab::{Vocabulary, BOS};

    fn base() -> ToyTransformer {
        let vocab = Vocabulary::new(["a", "b"])
            .unwrap()
            .with_visual_bins(2)
            .unwrap();
        ToyTransformer::new(vocab, 11, 1, 1, 4, 16).unwrap()
    }

    fn probe(m: &ToyTransformer) -> Vec<f64> {
        let vis = VisualTokens::single(m.vocab().visual_bin(1).unwrap());
        m.forward(&vis, &[BOS], &[]).unwrap().logits
    }

    #[test]
    fn empty_map_passes_through_for_all() {
        let set = CategoryModels::from_adapters(
            base(),
            &BTreeMap::new(),
            MissingAdapterPolicy::PassThrough,
        )
        .unwrap();
        let baseline = probe(set.base());
        for c in Category::ALL {
            assert_eq!(probe(set.model_for(c).unwrap()), baseline);
        }
    }

    #[test]
    fn strict_mode_errors_on_missing() {
        let set =
            CategoryModels::from_adapters(base(), &BTreeMap::new(), MissingAdapterPolicy::Strict)
                .unwrap();
        assert!(matches!(
            set.model_for(Category::Pleura),
            Err(ModelError::MissingAdapter(Category::Pleura))
        ));
    }

    #[test]
    fn distinct_adapters_give_distinct_forwards() {
        let b = base();
        let vocab_len = b.vocab().len();
        let mut adapters = BTreeMap::new();
        adapters.insert(
            Category::Pleura,
            LoraDelta::seeded("head", 4, vocab_len, 1, 1.0, 100),
        );
        adapters.insert(
            Category::Cardiovascular,
            LoraDelta::seeded("head", 4, vocab_len, 1, 1.0, 200),
        );
        let set =
            CategoryModels::from_adapters(b, &adapters, MissingAdapterPolicy::PassThrough).unwrap();
        let p = probe(set.model_for(Category::Pleura).unwrap());
        let c = probe(set.model_for(Category::Cardiovascular).unwrap());
        assert_ne!(p, c);
    }

    #[test]
    fn same_adapter_everywhere_is_uniform() {
        let b = base();
        let vocab_len = b.vocab().len();
        let delta = LoraDelta::seeded("head", 4, vocab_len, 1, 1.0, 7);
        let mut adapters = BTreeMap::new();
        for c in Category::ALL {
            adapters.insert(c, delta.clone());
        }
        let set =
            CategoryModels::from_adapters(b, &adapters, MissingAdapterPolicy::Strict).unwrap();
        let first = probe(set.model_for(Category::LungsAndAirways).unwrap());
        for c in Category::ALL {
            assert_eq!(probe(set.model_for(c).unwrap()), first);
        }
    }
}
