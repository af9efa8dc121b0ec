//! Dataset generation: few-shot prompts for every premise and relation,
//! batched completion, hypothesis extraction and record assembly.

use thiserror::Error;

use crate::corpus::PremiseSentence;
use crate::dataset::{dedup, interleave, GenerationStats, NliPair, Provenance};
use crate::fewshot::{partition_pool, premises_by_set, split_pool, FewShotError, FewShotSet, FewShotStrategy};
use crate::gateway::{complete_batch, BackendConfig, CompletionBackend, GatewayError, ResponseRecord};
use crate::promptkit::{extract_hypothesis, ExtractionPolicy, PromptError, Relation, RenderedPrompt, TemplateSet};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationPlan {
    pub strategy: FewShotStrategy,
    pub seed: u64,
    pub extraction: ExtractionPolicy,
    /// Recorded verbatim in every record's provenance.
    pub timestamp: String,
}

#[derive(Debug)]
pub struct GenerationOutput {
    /// One dataset per few-shot set (a single one for zero-shot).
    pub per_set: Vec<Vec<NliPair>>,
    /// Round-robin interleave of `per_set`, deduplicated.
    pub merged: Vec<NliPair>,
    pub stats: GenerationStats,
    pub prompts: Vec<RenderedPrompt>,
    /// First-pass responses, aligned with `prompts`.
    pub responses: Vec<ResponseRecord>,
    /// Re-requests after extraction failure, keyed by prompt index.
    pub retries: Vec<(usize, ResponseRecord)>,
    pub backend: String,
}

/// Few-shot sets for one relation; `None` entries for zero-shot.
fn sets_for(
    pool: &[crate::fewshot::FewShotExample],
    relation: Relation,
    plan: &GenerationPlan,
) -> Result<Vec<Option<FewShotSet>>, FewShotError> {
    if plan.strategy.is_zero_shot() {
        return Ok(vec![None]);
    }
    let seed = derive_seed(plan.seed, &format!("fewshot/{relation}"));
    Ok(
        partition_pool(pool, relation, plan.strategy.shots(), plan.strategy.sets(), seed)?
            .into_iter()
            .map(Some)
            .collect(),
    )
}

/// Builds prompts in set-major, then premise, then relation order.
pub fn build_prompts(
    premises: &[PremiseSentence],
    pool: &[crate::fewshot::FewShotExample],
    templates: &TemplateSet,
    plan: &GenerationPlan,
) -> Result<Vec<RenderedPrompt>, GenerationError> {
    let (entailment_pool, contradiction_pool) = split_pool(pool);
    let entailment_sets = sets_for(&entailment_pool, Relation::Entailment, plan)?;
    let contradiction_sets = sets_for(&contradiction_pool, Relation::Contradiction, plan)?;
    let groups = premises_by_set(premises, entailment_sets.len())?;
    let mut prompts = Vec::with_capacity(premises.len() * 2);
    for (set_index, group) in groups.iter().enumerate() {
        for premise in group {
            for (relation, sets) in [
                (Relation::Entailment, &entailment_sets),
                (Relation::Contradiction, &contradiction_sets),
            ] {
                prompts.push(templates.build_generation_prompt(premise, relation, sets[set_index].as_ref())?);
            }
        }
    }
    Ok(prompts)
}

pub fn generate(
    premises: &[PremiseSentence],
    pool: &[crate::fewshot::FewShotExample],
    templates: &TemplateSet,
    backend: &dyn CompletionBackend,
    config: &BackendConfig,
    plan: &GenerationPlan,
) -> Result<GenerationOutput, GenerationError> {
    let prompts = build_prompts(premises, pool, templates, plan)?;
    let responses = complete_batch(backend, &prompts, config)?;
    let mut stats = GenerationStats {
        prompts: prompts.len(),
        ..Default::default()
    };

    let mut extracted: Vec<Option<String>> = vec![None; prompts.len()];
    let mut failed_extraction = Vec::new();
    for (i, record) in responses.iter().enumerate() {
        match record {
            Ok(r) => {
                stats.completed += 1;
                match extract_hypothesis(&r.completion_text) {
                    Ok(h) => extracted[i] = Some(h),
                    Err(_) => failed_extraction.push(i),
                }
            }
            Err(_) => stats.backend_failures += 1,
        }
    }

    let mut retries = Vec::new();
    if plan.extraction == ExtractionPolicy::RetryOnce && !failed_extraction.is_empty() {
        let again: Vec<&RenderedPrompt> = failed_extraction.iter().map(|&i| &prompts[i]).collect();
        let records = complete_batch(backend, &again, config)?;
        stats.extraction_retries += again.len();
        let mut still_failed = Vec::new();
        for (&i, record) in failed_extraction.iter().zip(records) {
            let record = record
                .map(|mut r| {
                    r.request_index = i;
                    r
                })
                .map_err(|mut f| {
                    f.request_index = i;
                    f
                });
            match record.as_ref().map(|r| extract_hypothesis(&r.completion_text)) {
                Ok(Ok(h)) => extracted[i] = Some(h),
                _ => still_failed.push(i),
            }
            retries.push((i, record));
        }
        failed_extraction = still_failed;
    }
    stats.extraction_failures = failed_extraction.len();

    let backend_name = backend.identity();
    let strategy = plan.strategy.to_string();
    let texts: std::collections::HashMap<u64, &str> = premises.iter().map(|p| (p.id, p.text.as_str())).collect();
    let mut per_set: Vec<Vec<NliPair>> = vec![Vec::new(); plan.strategy.sets().max(1)];
    for (prompt, hypothesis) in prompts.iter().zip(extracted) {
        let Some(hypothesis) = hypothesis else { continue };
        let provenance = Provenance {
            strategy: strategy.clone(),
            set_id: prompt.fewshot_set_id,
            backend: backend_name.clone(),
            timestamp: plan.timestamp.clone(),
        };
        match NliPair::new(texts[&prompt.premise_id], hypothesis, prompt.relation, provenance) {
            Ok(pair) => per_set[prompt.fewshot_set_id.unwrap_or(0)].push(pair),
            Err(_) => stats.invalid_pairs += 1,
        }
    }
    let per_set: Vec<Vec<NliPair>> = per_set.into_iter().map(dedup).collect();
    let merged = interleave(&per_set);
    stats.pairs = merged.len();

    Ok(GenerationOutput {
        per_set,
        merged,
        stats,
        prompts,
        responses,
        retries,
        backend: backend_name,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WhitespaceCounter;
    use crate::fewshot::FewShotExample;
    use crate::gateway::{DefaultReply, MockBackend, MockRule};
    use crate::promptkit::count_answer_cues;
    use crate::synthetic::{echo_reply, SyntheticWorld};

    fn premises(n: usize) -> Vec<PremiseSentence> {
        SyntheticWorld::new(5)
            .premises(n, "gen")
            .iter()
            .enumerate()
            .filter_map(|(i, t)| PremiseSentence::new(i as u64, t, &WhitespaceCounter))
            .collect()
    }

    fn plan(strategy: FewShotStrategy) -> GenerationPlan {
        GenerationPlan {
            strategy,
            seed: 3,
            extraction: ExtractionPolicy::Drop,
            timestamp: "1970-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn five_by_four_assigns_sets_round_robin() {
        let pool = SyntheticWorld::new(5).fewshot_pool(20);
        let backend = MockBackend::new(vec![]).with_default(DefaultReply::Generated(echo_reply()));
        let out = generate(
            &premises(40),
            &pool,
            &TemplateSet::default(),
            &backend,
            &BackendConfig::default(),
            &plan(FewShotStrategy::FIVE_SHOT_X4),
        )
        .unwrap();
        assert_eq!(out.per_set.len(), 4);
        assert!(out.per_set.iter().all(|s| s.len() == 20));
        assert_eq!(out.merged.len(), 80);
        assert_eq!(out.stats.pairs, 80);
        assert!(out.prompts.iter().all(|p| count_answer_cues(&p.text) == 6));
        for p in &out.prompts {
            assert_eq!(p.fewshot_set_id, Some(p.premise_id as usize % 4));
        }
        // first record of each set, round robin
        let firsts: Vec<_> = out.merged[..8].iter().map(|p| p.provenance.set_id).collect();
        assert_eq!(firsts, [0, 1, 2, 3, 0, 1, 2, 3].map(Some));
    }

    #[test]
    fn extraction_failures_are_counted_and_dropped() {
        let pool: Vec<FewShotExample> = Vec::new();
        let backend = MockBackend::new(vec![MockRule::new("", "no closing quote here")]);
        let mut p = plan(FewShotStrategy::ZERO_SHOT);
        p.extraction = ExtractionPolicy::RetryOnce;
        let out = generate(
            &premises(3),
            &pool,
            &TemplateSet::default(),
            &backend,
            &BackendConfig::default(),
            &p,
        )
        .unwrap();
        assert_eq!(out.stats.completed, 6);
        assert_eq!(out.stats.extraction_failures, 6);
        assert_eq!(out.stats.extraction_retries, 6);
        assert_eq!(out.retries.len(), 6);
        assert!(out.merged.is_empty());
        assert_eq!(out.stats.extraction_failure_rate(), Some(1.0));
    }

    #[test]
    fn pool_too_small_is_reported() {
        let pool = SyntheticWorld::new(5).fewshot_pool(10);
        let backend = MockBackend::new(vec![]).with_default(DefaultReply::Generated(echo_reply()));
        let err = generate(
            &premises(4),
            &pool,
            &TemplateSet::default(),
            &backend,
            &BackendConfig::default(),
            &plan(FewShotStrategy::FIVE_SHOT_X4),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            GenerationError::FewShot(FewShotError::PoolTooSmall { .. })
        ));
    }
}
