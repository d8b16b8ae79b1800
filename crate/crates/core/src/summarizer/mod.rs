//! Budgeted report summarization: one completion call per attempt,
//! regeneration when a response is empty, fails, or runs over the token
//! budget, and a content-addressed cache so long runs can resume.
//!
//! Budgets are measured with the conditioning tokenizer, because the limit
//! that matters is the text encoder's window, not the LLM's own vocabulary.

mod cache;
mod client;
mod prompts;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, SummaryCache};
pub use client::{CompletionClient, CompletionParams, HttpClient, MockClient, DEFAULT_MODEL};
pub use prompts::PromptChain;

use crate::corpus::{compose_caption, Manifest, ScoreLabel};
use crate::error::{Error, Result};
use crate::textcond::Tokenizer;

#[derive(Debug, Clone)]
pub struct SummaryRequest {
    pub case_id: String,
    pub report_text: String,
    pub token_budget: usize,
    pub prompt_chain: PromptChain,
    pub max_retries: usize,
    /// Token capacity of the conditioning context. When set, the summary
    /// must also leave room for the score clauses.
    pub caption_capacity: Option<usize>,
    /// Accept a word-truncated response once every attempt is over budget.
    pub truncate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryResult {
    pub case_id: String,
    pub summary: String,
    pub measured_tokens: usize,
    pub attempts: usize,
    pub model_id: String,
    pub cached: bool,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Accepted { tokens: usize },
    OverBudget { tokens: usize, limit: usize },
    Empty,
    ClientError { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub attempt: usize,
    pub response: Option<String>,
    #[serde(flatten)]
    pub outcome: AttemptOutcome,
}

#[derive(Debug, thiserror::Error)]
pub enum SummarizeError {
    #[error("case {case_id}: no valid summary after {} attempt(s)", transcript.len())]
    RetriesExhausted {
        case_id: String,
        transcript: Vec<Attempt>,
    },
    #[error(transparent)]
    Other(#[from] Error),
}

/// Spaces successive client calls at least `min_interval` apart, across
/// all workers sharing it.
#[derive(Debug)]
pub struct RateLimiter {
    min_interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        Self {
            min_interval,
            next: Mutex::new(None),
        }
    }

    pub fn wait(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let mut next = self.next.lock().expect("rate limiter lock");
        let now = Instant::now();
        if let Some(at) = *next {
            if at > now {
                std::thread::sleep(at - now);
            }
        }
        *next = Some(Instant::now() + self.min_interval);
    }
}

/// Tokens the two score clauses add to a caption.
pub fn clause_tokens(tokenizer: &Tokenizer) -> usize {
    [ScoreLabel::Low, ScoreLabel::High]
        .iter()
        .flat_map(|t| [ScoreLabel::Low, ScoreLabel::High].map(|l| (*t, l)))
        .map(|(t, l)| tokenizer.count_tokens(&format!("{} {}", t.tumour_clause(), l.til_clause())))
        .max()
        .unwrap_or(0)
}

fn effective_limit(request: &SummaryRequest, tokenizer: &Tokenizer) -> Result<usize> {
    let mut limit = request.token_budget;
    if let Some(cap) = request.caption_capacity {
        limit = limit.min(cap.saturating_sub(clause_tokens(tokenizer)));
    }
    if limit == 0 {
        return Err(Error::InvalidArgument(format!(
            "budget {} leaves no room for a summary (caption capacity {:?})",
            request.token_budget, request.caption_capacity
        )));
    }
    Ok(limit)
}

/// Longest whitespace-word prefix within `limit` tokens.
fn truncate_to(text: &str, limit: usize, tokenizer: &Tokenizer) -> Option<String> {
    let mut kept = Vec::new();
    let mut used = 0;
    for word in text.split_whitespace() {
        let n = tokenizer.count_tokens(word);
        if used + n > limit {
            break;
        }
        used += n;
        kept.push(word);
    }
    (!kept.is_empty()).then(|| kept.join(" "))
}

/// Summarizes one report, counting with the bundled conditioning tokenizer.
pub fn summarize(
    request: &SummaryRequest,
    client: &dyn CompletionClient,
    cache: &SummaryCache,
) -> Result<SummaryResult, SummarizeError> {
    summarize_with(request, client, cache, &Tokenizer::bundled(), None)
}

pub fn summarize_with(
    request: &SummaryRequest,
    client: &dyn CompletionClient,
    cache: &SummaryCache,
    tokenizer: &Tokenizer,
    limiter: Option<&RateLimiter>,
) -> Result<SummaryResult, SummarizeError> {
    if request.report_text.trim().is_empty() {
        return Err(Error::InvalidArgument(format!("case {}: report text is empty", request.case_id)).into());
    }
    if request.token_budget == 0 {
        return Err(Error::InvalidArgument("token budget must be at least 1".into()).into());
    }
    let limit = effective_limit(request, tokenizer)?;
    let key = cache_key(
        &request.case_id,
        request.token_budget,
        client.model_id(),
        &request.prompt_chain.hash(),
    );
    if let Some(hit) = cache.get(&key) {
        if tokenizer.count_tokens(&hit.summary) <= limit {
            return Ok(SummaryResult { cached: true, ..hit });
        }
    }

    let prompt = request.prompt_chain.render(&request.report_text, request.token_budget);
    let mut transcript = Vec::new();
    let mut accepted = None;
    for attempt in 1..=request.max_retries + 1 {
        if let Some(l) = limiter {
            l.wait();
        }
        let params = CompletionParams {
            case_id: request.case_id.clone(),
            attempt,
            max_tokens: Some((request.token_budget * 4).max(64) as u32),
            temperature: if attempt == 1 { 0.0 } else { 0.7 },
        };
        let (response, outcome) = match client.complete(&prompt, &params) {
            Err(e) => (None, AttemptOutcome::ClientError { message: e.to_string() }),
            Ok(text) => {
                let text = text.trim().to_owned();
                let outcome = if text.is_empty() {
                    AttemptOutcome::Empty
                } else {
                    let tokens = tokenizer.count_tokens(&text);
                    if tokens <= limit {
                        AttemptOutcome::Accepted { tokens }
                    } else {
                        AttemptOutcome::OverBudget { tokens, limit }
                    }
                };
                (Some(text), outcome)
            }
        };
        log::debug!("case {} attempt {attempt}: {outcome:?}", request.case_id);
        let done = matches!(outcome, AttemptOutcome::Accepted { .. });
        transcript.push(Attempt {
            attempt,
            response,
            outcome,
        });
        if done {
            accepted = Some(attempt);
            break;
        }
    }

    let result = match accepted {
        Some(attempt) => {
            let summary = transcript[attempt - 1].response.clone().expect("accepted response");
            SummaryResult {
                case_id: request.case_id.clone(),
                measured_tokens: tokenizer.count_tokens(&summary),
                summary,
                attempts: attempt,
                model_id: client.model_id().to_owned(),
                cached: false,
                truncated: false,
            }
        }
        None => {
            let fallback = request
                .truncate
                .then(|| {
                    transcript.iter().rev().find_map(|a| match (&a.response, &a.outcome) {
                        (Some(r), AttemptOutcome::OverBudget { .. }) => truncate_to(r, limit, tokenizer),
                        _ => None,
                    })
                })
                .flatten();
            let Some(summary) = fallback else {
                return Err(SummarizeError::RetriesExhausted {
                    case_id: request.case_id.clone(),
                    transcript,
                });
            };
            SummaryResult {
                case_id: request.case_id.clone(),
                measured_tokens: tokenizer.count_tokens(&summary),
                summary,
                attempts: transcript.len(),
                model_id: client.model_id().to_owned(),
                cached: false,
                truncated: true,
            }
        }
    };
    cache.put(&key, &result)?;
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct CorpusOptions {
    pub budget: usize,
    pub max_retries: usize,
    pub prompt_chain: PromptChain,
    pub workers: usize,
    pub min_interval: Duration,
    pub caption_capacity: Option<usize>,
    pub truncate: bool,
    pub tokenizer: Arc<Tokenizer>,
}

impl CorpusOptions {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            max_retries: 3,
            prompt_chain: PromptChain::default(),
            workers: 4,
            min_interval: Duration::ZERO,
            caption_capacity: None,
            truncate: false,
            tokenizer: Tokenizer::bundled(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub patch_ids: Vec<String>,
    pub reason: String,
    pub transcript: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub budget: usize,
    pub results: BTreeMap<String, SummaryResult>,
    pub failures: Vec<CaseFailure>,
}

impl CorpusReport {
    pub fn cache_hits(&self) -> usize {
        self.results.values().filter(|r| r.cached).count()
    }
}

/// Summarizes every case in the manifest (one request per case, shared by
/// all its patches) and fills each record's caption. Cases that fail are
/// reported, and their records' captions cleared, rather than aborting.
pub fn summarize_corpus(
    manifest: &mut Manifest,
    client: &dyn CompletionClient,
    cache: &SummaryCache,
    options: &CorpusOptions,
) -> Result<CorpusReport> {
    let mut cases: BTreeMap<String, (String, Vec<usize>)> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut inconsistent = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let entry = cases
            .entry(r.case_id.clone())
            .or_insert_with(|| (r.report_text.clone(), Vec::new()));
        if entry.0 != r.report_text {
            inconsistent.push(r.case_id.clone());
        }
        entry.1.push(i);
    }
    inconsistent.dedup();
    for case in &inconsistent {
        let (_, idx) = cases.remove(case).expect("known case");
        failures.push(CaseFailure {
            case_id: case.clone(),
            patch_ids: idx.iter().map(|i| manifest.records[*i].patch_id.clone()).collect(),
            reason: "records of this case carry different report texts".into(),
            transcript: Vec::new(),
        });
    }

    let jobs: Vec<(&String, &String)> = cases.iter().map(|(c, (r, _))| (c, r)).collect();
    let outcomes: Mutex<BTreeMap<String, Result<SummaryResult, SummarizeError>>> = Mutex::new(BTreeMap::new());
    let limiter = RateLimiter::new(options.min_interval);
    let next = AtomicUsize::new(0);
    let workers = options.workers.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((case_id, report)) = jobs.get(i) else {
                    break;
                };
                let request = SummaryRequest {
                    case_id: (*case_id).clone(),
                    report_text: (*report).clone(),
                    token_budget: options.budget,
                    prompt_chain: options.prompt_chain.clone(),
                    max_retries: options.max_retries,
                    caption_capacity: options.caption_capacity,
                    truncate: options.truncate,
                };
                let out = summarize_with(&request, client, cache, &options.tokenizer, Some(&limiter));
                outcomes.lock().expect("outcome lock").insert((*case_id).clone(), out);
            });
        }
    });

    let mut results = BTreeMap::new();
    for (case_id, outcome) in outcomes.into_inner().expect("outcome lock") {
        let idx = &cases[&case_id].1;
        match outcome {
            Ok(res) => {
                for i in idx {
                    let r = &mut manifest.records[*i];
                    r.caption = Some(compose_caption(&res.summary, r.tumor_label, r.til_label)?);
                }
                results.insert(case_id, res);
            }
            Err(e) => {
                let transcript = match &e {
                    SummarizeError::RetriesExhausted { transcript, .. } => transcript.clone(),
                    SummarizeError::Other(_) => Vec::new(),
                };
                failures.push(CaseFailure {
                    patch_ids: idx.iter().map(|i| manifest.records[*i].patch_id.clone()).collect(),
                    case_id,
                    reason: e.to_string(),
                    transcript,
                });
            }
        }
    }
    for f in &failures {
        for r in manifest.records.iter_mut().filter(|r| r.case_id == f.case_id) {
            r.caption = None;
        }
    }
    failures.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(CorpusReport {
        budget: options.budget,
        results,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PatchRecord;
    use proptest::prelude::*;
    use std::collections::HashMap;
    use std::path::PathBuf;

    /// A response of exactly `n` conditioning tokens.
    fn text_of(n: usize) -> String {
        vec!["cells"; n].join(" ")
    }

    fn request(budget: usize, retries: usize) -> SummaryRequest {
        SummaryRequest {
            case_id: "c".into(),
            report_text: "Invasive ductal carcinoma, grade 2.".into(),
            token_budget: budget,
            prompt_chain: PromptChain::default(),
            max_retries: retries,
            caption_capacity: None,
            truncate: false,
        }
    }

    fn mock(case: &str, responses: Vec<String>) -> MockClient {
        MockClient::new(HashMap::from([(case.to_string(), responses)]))
    }

    #[test]
    fn first_valid_response_is_accepted() {
        let client = mock("c", vec![text_of(30)]);
        let r = summarize(&request(35, 2), &client, &SummaryCache::in_memory()).unwrap();
        assert_eq!((r.attempts, r.measured_tokens, r.cached), (1, 30, false));
    }

    #[test]
    fn over_budget_response_is_regenerated() {
        let client = mock("c", vec![text_of(60), text_of(33)]);
        let r = summarize(&request(35, 2), &client, &SummaryCache::in_memory()).unwrap();
        assert_eq!((r.attempts, r.measured_tokens), (2, 33));
    }

    #[test]
    fn exhausting_retries_reports_the_transcript() {
        let client = mock("c", vec![text_of(200)]);
        match summarize(&request(20, 2), &client, &SummaryCache::in_memory()) {
            Err(SummarizeError::RetriesExhausted { transcript, .. }) => {
                assert_eq!(transcript.len(), 3);
                assert!(transcript
                    .iter()
                    .all(|a| a.outcome == AttemptOutcome::OverBudget { tokens: 200, limit: 20 }));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(client.calls(), 3);
    }

    #[test]
    fn transport_failures_and_empty_responses_are_retried() {
        let client = mock("c", vec!["!error: timeout".into(), "   ".into(), text_of(5)]);
        let r = summarize(&request(10, 2), &client, &SummaryCache::in_memory()).unwrap();
        assert_eq!(r.attempts, 3);
    }

    #[test]
    fn cache_hit_skips_the_client() {
        let cache = SummaryCache::in_memory();
        let client = mock("c", vec![text_of(10)]);
        let first = summarize(&request(20, 0), &client, &cache).unwrap();
        let second = summarize(&request(20, 0), &client, &cache).unwrap();
        assert_eq!(client.calls(), 1);
        assert!(second.cached);
        assert_eq!(first.summary, second.summary);
        // A different budget is a different key.
        summarize(&request(25, 0), &client, &cache).unwrap();
        assert_eq!(client.calls(), 2);
    }

    #[test]
    fn truncation_is_opt_in() {
        let client = mock("c", vec![text_of(50)]);
        let mut req = request(20, 1);
        assert!(summarize(&req, &client, &SummaryCache::in_memory()).is_err());
        req.truncate = true;
        let r = summarize(&req, &client, &SummaryCache::in_memory()).unwrap();
        assert!(r.truncated);
        assert_eq!(r.measured_tokens, 20);
    }

    #[test]
    fn capacity_reserves_room_for_the_score_clauses() {
        let tok = Tokenizer::bundled();
        assert_eq!(clause_tokens(&tok), 6);
        let client = mock("c", vec![text_of(150), text_of(148)]);
        let mut req = request(150, 1);
        req.caption_capacity = Some(154);
        let r = summarize(&req, &client, &SummaryCache::in_memory()).unwrap();
        assert_eq!(r.attempts, 2);
        let caption = compose_caption(&r.summary, ScoreLabel::High, ScoreLabel::High).unwrap();
        assert_eq!(tok.count_tokens(&caption), 154);
    }

    #[test]
    fn empty_report_is_rejected_without_calls() {
        let client = mock("c", vec![text_of(3)]);
        let mut req = request(10, 2);
        req.report_text = " ".into();
        assert!(matches!(
            summarize(&req, &client, &SummaryCache::in_memory()),
            Err(SummarizeError::Other(_))
        ));
        assert_eq!(client.calls(), 0);
    }

    #[test]
    fn rate_limiter_spaces_calls() {
        let l = RateLimiter::new(Duration::from_millis(20));
        let start = Instant::now();
        for _ in 0..4 {
            l.wait();
        }
        assert!(start.elapsed() >= Duration::from_millis(60));
    }

    fn manifest(cases: usize) -> Manifest {
        let records = (0..cases)
            .map(|i| PatchRecord {
                patch_id: format!("p{i}"),
                image_path: PathBuf::from(format!("p{i}.png")),
                case_id: format!("c{i}"),
                report_text: format!("Report {i}: ductal carcinoma."),
                tumor_label: ScoreLabel::High,
                til_label: ScoreLabel::Low,
                split: None,
                caption: None,
            })
            .collect();
        Manifest::new(".", records).unwrap()
    }

    fn script(cases: usize, fail: Option<usize>) -> MockClient {
        MockClient::new(
            (0..cases)
                .map(|i| {
                    let r = if Some(i) == fail {
                        text_of(80)
                    } else {
                        format!("Summary {i}. {}", text_of(5))
                    };
                    (format!("c{i}"), vec![r])
                })
                .collect(),
        )
    }

    #[test]
    fn corpus_cold_then_warm_cache() {
        let mut m = manifest(5);
        let client = script(5, None);
        let cache = SummaryCache::in_memory();
        let opts = CorpusOptions::new(20);
        let report = summarize_corpus(&mut m, &client, &cache, &opts).unwrap();
        assert_eq!(report.results.len(), 5);
        assert_eq!(client.calls(), 5);
        assert!(m.records.iter().all(|r| r.caption.as_deref().unwrap().ends_with("High tumour; Low TIL;")));
        client.reset_calls();
        let mut again = manifest(5);
        let warm = summarize_corpus(&mut again, &client, &cache, &opts).unwrap();
        assert_eq!(client.calls(), 0);
        assert_eq!(warm.cache_hits(), 5);
        assert_eq!(again, m);
    }

    #[test]
    fn corpus_reports_permanent_failures() {
        let mut m = manifest(5);
        let client = script(5, Some(3));
        let report = summarize_corpus(&mut m, &client, &SummaryCache::in_memory(), &CorpusOptions::new(20)).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].case_id, "c3");
        assert_eq!(report.failures[0].transcript.len(), 4);
        assert_eq!(m.records.iter().filter(|r| r.caption.is_some()).count(), 4);
    }

    #[test]
    fn corpus_output_is_deterministic_across_worker_counts() {
        let mut outputs = Vec::new();
        for workers in [1, 3] {
            let mut m = manifest(7);
            let mut opts = CorpusOptions::new(20);
            opts.workers = workers;
            let report = summarize_corpus(&mut m, &script(7, Some(2)), &SummaryCache::in_memory(), &opts).unwrap();
            outputs.push((serde_json::to_string(&report).unwrap(), m));
        }
        assert_eq!(outputs[0], outputs[1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn budget_and_retry_bounds_hold(
            lengths in proptest::collection::vec(0usize..60, 1..6),
            budget in 1usize..50,
            retries in 0usize..4,
        ) {
            let client = mock("c", lengths.iter().map(|n| text_of(*n)).collect());
            let outcome = summarize(&request(budget, retries), &client, &SummaryCache::in_memory());
            prop_assert!(client.calls() <= retries + 1);
            match outcome {
                Ok(r) => {
                    prop_assert!(count_tokens_bundled(&r.summary) <= budget);
                    prop_assert!(r.attempts <= retries + 1);
                    // Anything accepted at this budget is accepted at a larger one.
                    let wider = mock("c", lengths.iter().map(|n| text_of(*n)).collect());
                    let r2 = summarize(&request(budget + 10, retries), &wider, &SummaryCache::in_memory()).unwrap();
                    prop_assert!(r2.attempts <= r.attempts);
                }
                Err(SummarizeError::RetriesExhausted { transcript, .. }) => {
                    prop_assert_eq!(transcript.len(), retries + 1);
                }
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }

    fn count_tokens_bundled(s: &str) -> usize {
        crate::textcond::count_tokens(s)
    }
}
