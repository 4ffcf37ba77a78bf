//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the lines always reach stdout.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use evalinstruct::jobs::{self, BackendKind, Config, MockRule};
use evalinstruct::judge::{Backend, JudgeClient, JudgeRequest, NoiseSpec, SyntheticOracle};
use evalinstruct::metrics::{
    agreement_consistency, kendall, pearson, self_consistency, spearman, system_level, text_level,
    Aggregate, ScoreRow, ScoreTable, SwapJudgment, TextLevelOptions,
};
use evalinstruct::model::{
    swap_pair, Critique, CritiquePath, EvalSample, EvalSetting, Grounding, Locale, PairRecord,
    PairwiseCritique, PointwiseCritique, ScoreScale, Verdict,
};
use evalinstruct::parse::{
    pairwise_fragment, parse_augmented_queries, parse_pairwise, parse_pointwise,
    swap_assistant_labels, DropReason, ParseError,
};
use evalinstruct::pipeline::{
    BuildOptions, PairingPolicy, Pipeline, PipelineConfig, PipelineState,
};
use evalinstruct::prompt::{EvalInput, PromptKind, PromptKit, R2rfPayload};
use evalinstruct::synth::{SynthCorpus, SynthSpec};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

// ---------- 1. correlation oracles ----------

/// Pearson over integer-valued data with exact integer sums.
fn brute_pearson(x: &[i64], y: &[i64]) -> Option<f64> {
    let n = x.len() as i128;
    let (sx, sy): (i128, i128) = (
        x.iter().map(|&v| v as i128).sum(),
        y.iter().map(|&v| v as i128).sum(),
    );
    let sxy: i128 = x.iter().zip(y).map(|(&a, &b)| a as i128 * b as i128).sum();
    let sxx: i128 = x.iter().map(|&a| a as i128 * a as i128).sum();
    let syy: i128 = y.iter().map(|&b| b as i128 * b as i128).sum();
    let num = n * sxy - sx * sy;
    let (dx, dy) = (n * sxx - sx * sx, n * syy - sy * sy);
    if dx == 0 || dy == 0 {
        return None;
    }
    Some(num as f64 / ((dx as f64) * (dy as f64)).sqrt())
}

/// Twice the average rank, so ranks stay integral.
fn doubled_ranks(v: &[i64]) -> Vec<i64> {
    v.iter()
        .map(|&a| {
            let below = v.iter().filter(|&&b| b < a).count() as i64;
            let equal = v.iter().filter(|&&b| b == a).count() as i64;
            2 * below + equal + 1
        })
        .collect()
}

/// Tau-b by enumerating every pair.
fn brute_kendall(x: &[i64], y: &[i64]) -> Option<f64> {
    let n = x.len();
    let (mut concordant, mut discordant, mut tied_x, mut tied_y, mut pairs) =
        (0i64, 0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1;
            let dx = (x[i] - x[j]).signum();
            let dy = (y[i] - y[j]).signum();
            if dx == 0 {
                tied_x += 1;
            }
            if dy == 0 {
                tied_y += 1;
            }
            match dx * dy {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let (a, b) = (pairs - tied_x, pairs - tied_y);
    if a == 0 || b == 0 {
        return None;
    }
    Some((concordant - discordant) as f64 / ((a as f64) * (b as f64)).sqrt())
}

fn matches_oracle(
    name: &str,
    got: Result<f64, evalinstruct::metrics::MetricError>,
    want: Option<f64>,
) -> Result<(), String> {
    match (got, want) {
        (Ok(g), Some(w)) if (g - w).abs() <= 1e-12 => Ok(()),
        (Err(_), None) => Ok(()),
        (g, w) => Err(format!("{name}: got {g:?}, oracle {w:?}")),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut degenerate = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let span = rng.random_range(1..=6);
        let x: Vec<i64> = (0..n).map(|_| rng.random_range(0..=span)).collect();
        let y: Vec<i64> = (0..n).map(|_| rng.random_range(-span..=span)).collect();
        let (xf, yf): (Vec<f64>, Vec<f64>) = (
            x.iter().map(|&v| v as f64).collect(),
            y.iter().map(|&v| v as f64).collect(),
        );
        let want = brute_pearson(&x, &y);
        degenerate += usize::from(want.is_none());
        matches_oracle("pearson", pearson(&xf, &yf), want)?;
        matches_oracle(
            "spearman",
            spearman(&xf, &yf),
            brute_pearson(&doubled_ranks(&x), &doubled_ranks(&y)),
        )?;
        matches_oracle("kendall", kendall(&xf, &yf), brute_kendall(&x, &y))?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure!(elapsed < 10.0, "took {elapsed:.2}s");
    Ok(format!(
        "1000 tied integer vectors, {degenerate} degenerate, {elapsed:.2}s"
    ))
}

// ---------- 2. text vs system level ----------

fn criterion_2() -> Outcome {
    let mut rows = Vec::new();
    for q in 0..30 {
        let offset = (q * 13 % 7) as f64 * 3.0;
        for m in 0..8 {
            // Each model answers a different subset of queries, so per-model
            // means pick up different offsets.
            if (q + m) % 3 == 0 {
                continue;
            }
            let human = ((q * 5 + m * 3) % 9 + 1) as f64;
            rows.push(ScoreRow {
                query_id: format!("q{q:02}"),
                model_id: format!("m{m}"),
                human_score: human,
                metric_score: 2.0 * human + offset,
            });
        }
    }
    let table = ScoreTable::new(rows).map_err(|e| e.to_string())?;
    let text = text_level(&table, TextLevelOptions::default()).map_err(|e| e.to_string())?;
    let system = system_level(&table).map_err(|e| e.to_string())?;
    ensure!(text.r == 1.0, "text-level r = {:.17}", text.r);
    ensure!(
        text.groups_used == 30,
        "only {} groups used",
        text.groups_used
    );
    ensure!(system.r < 1.0, "system-level r = {}", system.r);
    Ok(format!("text r = {}, system r = {:.4}", text.r, system.r))
}

// ---------- 3. agreement / consistency ----------

fn criterion_3() -> Outcome {
    use Verdict::*;
    // Consistent iff the swapped verdict is the mirror of the original.
    let consistent = [(Win1, Win2), (Win2, Win1), (Tie, Tie)];
    for ab in Verdict::ALL {
        for ba in Verdict::ALL {
            for human in Verdict::ALL {
                let cons = consistent.contains(&(ab, ba));
                let agr = cons && ab == human;
                let r = agreement_consistency(&[SwapJudgment { ab, ba, human }]);
                let want = (f64::from(u8::from(agr)), f64::from(u8::from(cons)));
                ensure!(
                    (r.agreement, r.consistency) == want,
                    "{ab:?}/{ba:?}/{human:?}: {r:?}"
                );
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let n = rng.random_range(1..=20);
        let batch: Vec<SwapJudgment> = (0..n)
            .map(|_| SwapJudgment {
                ab: *Verdict::ALL.choose(&mut rng).unwrap(),
                ba: *Verdict::ALL.choose(&mut rng).unwrap(),
                human: *Verdict::ALL.choose(&mut rng).unwrap(),
            })
            .collect();
        let r = agreement_consistency(&batch);
        ensure!(
            r.agreement <= r.consistency,
            "agreement above consistency: {r:?}"
        );
    }
    Ok("27 single-pair cases exact, 10000 batches ordered".into())
}

// ---------- 4. conservation ----------

fn corpus(locale: Locale, queries: usize, models: usize, seed: u64) -> SynthCorpus {
    SynthCorpus::generate(
        locale,
        SynthSpec {
            queries,
            models_per_query: models,
            ..Default::default()
        },
        seed,
    )
}

fn oracle(c: &SynthCorpus, seed: u64, noise: NoiseSpec) -> SyntheticOracle {
    SyntheticOracle::new(seed, noise).with_book(Arc::new(c.book()))
}

fn run_state(
    c: &SynthCorpus,
    locale: Locale,
    backend: SyntheticOracle,
) -> Result<PipelineState, String> {
    let client = JudgeClient::new(Arc::new(backend));
    let kit = PromptKit::builtin(locale);
    let pipeline = Pipeline::new(&client, &kit, PipelineConfig::default(), 11, &c.queries)
        .map_err(|e| e.to_string())?;
    pipeline.run_all(&c.samples).map_err(|e| e.to_string())
}

fn criterion_4() -> Outcome {
    let c = corpus(Locale::Zh, 50, 4, 40);
    let noisy = NoiseSpec {
        malformed_rate: 0.05,
        ..NoiseSpec::noiseless()
    };
    let state = run_state(&c, Locale::Zh, oracle(&c, 4, noisy))?;
    let by_stage: BTreeMap<&str, _> = state.ledger.iter().map(|l| (l.stage.as_str(), l)).collect();
    for l in &state.ledger {
        let dropped: usize = l.drops.values().sum();
        ensure!(
            l.input == l.output + dropped,
            "{} not conserved: {l:?}",
            l.stage
        );
    }
    let expect_io = [
        ("point_r", 200, state.d_point_r.len()),
        ("path1_p2p", state.pairs.len(), state.d_pair_r.len()),
        (
            "path1_r2rf",
            state.d_pair_r.len(),
            state.path1_candidates.len(),
        ),
        ("point_rf", state.d_point_r.len(), state.d_point_rf.len()),
        ("path2_p2p", state.pairs.len(), state.path2_candidates.len()),
        (
            "cross_validate",
            state.pairs.len(),
            state.d_pair_rf.len() / 2,
        ),
    ];
    for (stage, input, output) in expect_io {
        let l = by_stage
            .get(stage)
            .ok_or(format!("missing ledger for {stage}"))?;
        ensure!(
            l.input == input && l.output == output,
            "{stage}: ledger {}/{} vs records {input}/{output}",
            l.input,
            l.output
        );
    }
    let malformed: usize = state
        .ledger
        .iter()
        .map(|l| {
            l.drops
                .get(&DropReason::MalformedFragment)
                .copied()
                .unwrap_or(0)
        })
        .sum();
    ensure!(malformed > 0, "no malformed output was dropped");
    let point_malformed = by_stage["point_r"]
        .drops
        .get(&DropReason::MalformedFragment)
        .copied()
        .unwrap_or(0);
    // 200 draws at 5%: mean 10, sd ~3.1
    ensure!(
        point_malformed <= 20,
        "point_r dropped {point_malformed} malformed critiques"
    );

    let clean = run_state(&c, Locale::Zh, oracle(&c, 4, NoiseSpec::noiseless()))?;
    let rate = clean.filter_rate.ok_or("no filter rate")?;
    ensure!(
        rate.pair_level == 0.0 && rate.record_level == 0.0,
        "noiseless filter rate {rate:?}"
    );
    ensure!(
        clean.d_point_r.len() == clean.d_point_rf.len(),
        "point_rf lost records"
    );
    for (r, rf) in clean.d_point_r.iter().zip(&clean.d_point_rf) {
        ensure!(
            r.sample == rf.sample && r.critique.overall_score == rf.critique.overall_score,
            "score drift on {}",
            r.sample.key()
        );
    }
    Ok(format!(
        "6 stages conserved, {malformed} malformed drops; noiseless filter rate 0"
    ))
}

// ---------- 5. cross-validation statistics ----------

fn criterion_5() -> Outcome {
    let c = corpus(Locale::En, 834, 4, 50);
    let kit = PromptKit::builtin(Locale::En);
    let config = PipelineConfig {
        pairing: PairingPolicy::AllPairs,
        ..Default::default()
    };
    let clean =
        JudgeClient::new(Arc::new(oracle(&c, 5, NoiseSpec::noiseless()))).with_max_inflight(16);
    let base =
        Pipeline::new(&clean, &kit, config.clone(), 5, &c.queries).map_err(|e| e.to_string())?;
    let point_r = base
        .build_point_referenced(&c.samples)
        .map_err(|e| e.to_string())?
        .kept;
    let pairs = base.make_pairs(&point_r);
    ensure!(pairs.len() >= 5000, "only {} pairs", pairs.len());
    let (_, path2) = base
        .run_path2(&point_r, &pairs)
        .map_err(|e| e.to_string())?;
    let decisive = path2
        .kept
        .iter()
        .filter(|e| e.critique.verdict != Verdict::Tie)
        .count() as f64;

    let mut lines = Vec::new();
    for p in [0.05, 0.1, 0.2] {
        let noise = NoiseSpec {
            p_flip: p,
            flip_on: vec![PromptKind::R2rfPair],
            ..NoiseSpec::noiseless()
        };
        let flipped =
            JudgeClient::new(Arc::new(oracle(&c, (p * 100.0) as u64, noise))).with_max_inflight(16);
        let pipeline = Pipeline::new(&flipped, &kit, config.clone(), 5, &c.queries)
            .map_err(|e| e.to_string())?;
        let (_, path1) = pipeline.run_path1(&pairs).map_err(|e| e.to_string())?;
        let (_, rate) = pipeline
            .cross_validate_stage(&pairs, &path1.kept, &path2.kept)
            .map_err(|e| e.to_string())?;
        // Only decisive verdicts can flip, and a flip always breaks agreement.
        let n = rate.candidate_pairs as f64;
        let expected = p * decisive / n;
        let sd = (decisive * p * (1.0 - p)).sqrt() / n;
        ensure!(
            (rate.pair_level - expected).abs() <= 3.0 * sd,
            "p={p}: filter rate {:.4}, expected {expected:.4} ± {:.4}",
            rate.pair_level,
            3.0 * sd
        );
        lines.push(format!(
            "p={p}: {:.4} (expected {expected:.4} ± {:.4})",
            rate.pair_level,
            3.0 * sd
        ));
    }
    Ok(format!(
        "{} pairs; {}; reference filter rate 7.7%",
        pairs.len(),
        lines.join(", ")
    ))
}

// ---------- 6. parser fixtures ----------

fn criterion_6() -> Outcome {
    let scale = ScoreScale::default();
    let zh_point = "综合来看，回答基本正确。\n{'事实正确性': 10, '满足用户需求': 7, '逻辑连贯性': 9, '创造性': 8, '丰富度': 7, '综合得分': 7}";
    let p = parse_pointwise(zh_point, scale, Locale::Zh, Grounding::Referenced)
        .map_err(|e| e.to_string())?;
    let p = p.pointwise().ok_or("not pointwise")?;
    ensure!(
        p.overall_score == 7 && p.dimension_scores.len() == 6,
        "zh pointwise: {p:?}"
    );

    let en_point = "The answer is partly correct.\n{'Overall Score': '5'}";
    let p = parse_pointwise(en_point, scale, Locale::En, Grounding::ReferenceFree)
        .map_err(|e| e.to_string())?;
    ensure!(
        p.pointwise().map(|c| c.overall_score) == Some(5),
        "en pointwise: {p:?}"
    );

    let zh_pair = "助手1的回答更完整。\n{'综合比较结果': '助手1'}";
    let v =
        parse_pairwise(zh_pair, Locale::Zh, Grounding::Referenced).map_err(|e| e.to_string())?;
    ensure!(
        v.pairwise().map(|c| c.verdict) == Some(Verdict::Win1),
        "zh pairwise: {v:?}"
    );

    let bracket = "Assistant 2 follows the instructions more closely. [[2]]";
    let v =
        parse_pairwise(bracket, Locale::En, Grounding::ReferenceFree).map_err(|e| e.to_string())?;
    ensure!(
        v.pairwise().map(|c| c.verdict) == Some(Verdict::Win2),
        "bracket: {v:?}"
    );

    let unbalanced = parse_pointwise(
        "分析。\n{'综合得分': 7",
        scale,
        Locale::Zh,
        Grounding::Referenced,
    );
    ensure!(
        matches!(unbalanced, Err(ParseError::MalformedFragment(_))),
        "unbalanced: {unbalanced:?}"
    );
    let out_of_range =
        parse_pointwise("{'综合得分': 12}", scale, Locale::Zh, Grounding::Referenced);
    ensure!(
        matches!(
            out_of_range,
            Err(ParseError::ScoreOutOfRange { score: 12, .. })
        ),
        "out of range: {out_of_range:?}"
    );
    let contradiction = parse_pairwise(
        "{'Overall Comparison Result': 'Assistant 1'} [[2]]",
        Locale::En,
        Grounding::ReferenceFree,
    );
    ensure!(
        matches!(
            contradiction,
            Err(ParseError::AmbiguousVerdict {
                fragment: Verdict::Win1,
                bracket: Verdict::Win2
            })
        ),
        "contradiction: {contradiction:?}"
    );
    let absent = parse_pointwise("no fragment here", scale, Locale::En, Grounding::Referenced);
    ensure!(
        matches!(absent, Err(ParseError::NoTerminalFragment)),
        "absent: {absent:?}"
    );
    Ok("4 transcribed endings parse; 4 malformed variants rejected with their errors".into())
}

// ---------- 7. swap involution ----------

fn random_pair_text(rng: &mut ChaCha8Rng, locale: Locale, verdict: Verdict) -> String {
    let (a1, a2) = match locale {
        Locale::Zh => ("助手1", "助手2"),
        Locale::En => ("Assistant 1", "Assistant 2"),
    };
    let mut parts = Vec::new();
    for _ in 0..rng.random_range(1..6) {
        let name = if rng.random_bool(0.5) { a1 } else { a2 };
        let filler = match locale {
            Locale::Zh => {
                ["的回答更详细。", "遗漏了要点，", "在逻辑上更连贯；"][rng.random_range(0..3)]
            }
            Locale::En => [
                " is more detailed.",
                " misses a key step,",
                " reasons more coherently;",
            ][rng.random_range(0..3)],
        };
        parts.push(format!("{name}{filler}"));
    }
    let mut text = parts.join(" ");
    text.push('\n');
    text.push_str(&pairwise_fragment(verdict, locale));
    if rng.random_bool(0.5) {
        let bracket = match verdict {
            Verdict::Win1 => "[[1]]",
            Verdict::Win2 => "[[2]]",
            Verdict::Tie => "[[Tie]]",
        };
        text.push_str(&format!(" {bracket}"));
    }
    text
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..500 {
        let locale = if i % 2 == 0 { Locale::Zh } else { Locale::En };
        let verdict = *Verdict::ALL.choose(&mut rng).unwrap();
        let sample = |m: &str| EvalSample {
            query_id: format!("q{i}"),
            model_id: m.into(),
            text: format!("{m} answer {}", rng.clone().random::<u32>()),
            reference: Some("ref".into()),
        };
        let (s1, s2) = (sample("a"), sample("b"));
        let label = if rng.random_bool(0.5) {
            Some(verdict)
        } else {
            None
        };
        let record =
            PairRecord::new(s1, s2, Some("ref".into()), label).map_err(|e| e.to_string())?;
        let bytes = serde_json::to_vec(&record).unwrap();
        let twice = swap_pair(swap_pair(record.clone()));
        ensure!(
            serde_json::to_vec(&twice).unwrap() == bytes,
            "record {i} not restored"
        );

        let text = random_pair_text(&mut rng, locale, verdict);
        let swapped = swap_assistant_labels(&text);
        ensure!(
            swap_assistant_labels(&swapped) == text,
            "text {i} not restored: {text:?}"
        );
        let parsed = parse_pairwise(&swapped, locale, Grounding::ReferenceFree)
            .map_err(|e| format!("{i}: {e}"))?;
        ensure!(
            parsed.pairwise().map(|c| c.verdict) == Some(verdict.mirror()),
            "text {i} verdict not mirrored"
        );
    }

    let c = corpus(Locale::En, 12, 4, 70);
    let client = JudgeClient::new(Arc::new(oracle(&c, 7, NoiseSpec::noiseless())));
    let kit = PromptKit::builtin(Locale::En);
    let pipeline = Pipeline::new(&client, &kit, PipelineConfig::default(), 7, &c.queries)
        .map_err(|e| e.to_string())?;
    let state = pipeline.run_all(&c.samples).map_err(|e| e.to_string())?;
    let count = |swap| -> Result<[usize; 4], String> {
        let records = pipeline.emit_sft(&state, swap).map_err(|e| e.to_string())?;
        let mut n = [0; 4];
        for r in &records {
            n[EvalSetting::ALL
                .iter()
                .position(|s| *s == r.setting)
                .unwrap()] += 1;
        }
        Ok(n)
    };
    let (plain, doubled) = (count(false)?, count(true)?);
    ensure!(
        doubled[0] == plain[0]
            && doubled[1] == plain[1]
            && doubled[2] == 2 * plain[2]
            && doubled[3] == 2 * plain[3],
        "emit counts {plain:?} -> {doubled:?}"
    );
    Ok(format!(
        "500 records involutive and mirrored; SFT {plain:?} -> {doubled:?}"
    ))
}

// ---------- 8. self-consistency ----------

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..1000 {
        let k = rng.random_range(1..=10);
        let scores: Vec<i32> = (0..k).map(|_| rng.random_range(1..=10)).collect();
        let cands: Vec<Critique> = scores
            .iter()
            .map(|&s| {
                Critique::Pointwise(PointwiseCritique {
                    dimension_scores: Default::default(),
                    overall_score: s,
                    explanation: format!("score {s}"),
                    setting: EvalSetting::POINT_RF,
                })
            })
            .collect();
        let mean = scores.iter().map(|&s| f64::from(s)).sum::<f64>() / k as f64;
        let (lo, hi) = (
            *scores.iter().min().unwrap() as f64,
            *scores.iter().max().unwrap() as f64,
        );
        match self_consistency(&cands).map_err(|e| e.to_string())? {
            Aggregate::Pointwise {
                score, selected, ..
            } => {
                ensure!(
                    (score - mean).abs() <= 1e-12,
                    "set {i}: {score} vs mean {mean}"
                );
                ensure!(
                    lo <= score && score <= hi,
                    "set {i}: {score} outside [{lo}, {hi}]"
                );
                let best = scores
                    .iter()
                    .map(|&s| (f64::from(s) - mean).abs())
                    .fold(f64::INFINITY, f64::min);
                ensure!(
                    (f64::from(scores[selected]) - mean).abs() == best,
                    "set {i}: selected {selected} not nearest"
                );
            }
            other => return Err(format!("set {i}: {other:?}")),
        }

        let verdicts: Vec<Verdict> = (0..k)
            .map(|_| *Verdict::ALL.choose(&mut rng).unwrap())
            .collect();
        let mut votes = [0usize; 3];
        for v in &verdicts {
            votes[Verdict::ALL.iter().position(|x| x == v).unwrap()] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let leaders: Vec<Verdict> = Verdict::ALL
            .into_iter()
            .zip(votes)
            .filter(|(_, n)| *n == top)
            .map(|(v, _)| v)
            .collect();
        let want = if leaders.len() == 1 {
            leaders[0]
        } else {
            Verdict::Tie
        };
        let pair_cands: Vec<Critique> = verdicts
            .iter()
            .map(|&v| {
                Critique::Pairwise(PairwiseCritique {
                    verdict: v,
                    explanation: format!("{v:?}"),
                    setting: EvalSetting::PAIR_RF,
                    path: CritiquePath::Direct,
                })
            })
            .collect();
        match self_consistency(&pair_cands).map_err(|e| e.to_string())? {
            Aggregate::Pairwise {
                verdict,
                votes: got,
                ..
            } => {
                ensure!(
                    verdict == want && got == votes,
                    "set {i}: {verdict:?} {got:?}, oracle {want:?} {votes:?}"
                );
            }
            other => return Err(format!("set {i}: {other:?}")),
        }
    }
    Ok("1000 pointwise and 1000 pairwise candidate sets".into())
}

// ---------- 9. grammar closure ----------

struct Tally {
    total: usize,
    failures: Vec<String>,
}

impl Tally {
    fn check(&mut self, what: &str, ok: bool) {
        self.total += 1;
        if !ok {
            self.failures.push(what.to_string());
        }
    }
}

fn ask(backend: &SyntheticOracle, prompt: String) -> Result<String, String> {
    let request = JudgeRequest::prompt(prompt, Default::default(), "closure");
    backend
        .call(&request)
        .map(|mut v| v.remove(0))
        .map_err(|e| e.to_string())
}

fn closure_for(locale: Locale, tally: &mut Tally) -> Result<(), String> {
    let c = corpus(locale, 14, 3, 90);
    let kit = PromptKit::builtin(locale);
    let scale = kit.scale();
    let judge = oracle(&c, 9, NoiseSpec::noiseless());
    let dims = locale.default_dimensions();
    let point = |raw: &str, g| {
        parse_pointwise(raw, scale, locale, g)
            .ok()
            .and_then(|o| o.pointwise().cloned())
    };
    let pair = |raw: &str, g| {
        parse_pairwise(raw, locale, g)
            .ok()
            .and_then(|o| o.pairwise().cloned())
    };
    let err = |e: evalinstruct::prompt::PromptError| e.to_string();

    let mut seeds = Vec::new();
    for q in &c.queries {
        let samples: Vec<&EvalSample> = c.samples.iter().filter(|s| s.query_id == q.id).collect();
        let reference = samples[0].reference.as_deref();
        seeds.push((q.text.clone(), q.category.clone()));
        let mut point_r = Vec::new();
        let mut point_rf = Vec::new();
        for s in &samples {
            let raw = ask(
                &judge,
                kit.render_referenced_pointwise(&q.text, reference, &s.text, &dims)
                    .map_err(err)?,
            )?;
            let r = point(&raw, Grounding::Referenced);
            tally.check("point_r", r.is_some());
            let Some(r) = r else { continue };
            let raw = ask(
                &judge,
                kit.render_r2rf(
                    &q.text,
                    reference,
                    R2rfPayload::Point {
                        sample: &s.text,
                        critique: &r,
                    },
                )
                .map_err(err)?,
            )?;
            let rf = point(&raw, Grounding::ReferenceFree);
            tally.check("r2rf_point", rf.is_some());
            for (setting, g) in [
                (EvalSetting::POINT_R, Grounding::Referenced),
                (EvalSetting::POINT_RF, Grounding::ReferenceFree),
            ] {
                let raw = ask(
                    &judge,
                    kit.render_sft_input(setting, &q.text, reference, &[&s.text], &dims)
                        .map_err(err)?,
                )?;
                tally.check(setting.tag(), point(&raw, g).is_some());
            }
            let refine = kit.render_refine_with_critique(
                &q.text,
                &s.text,
                &Critique::Pointwise(rf.clone().unwrap_or(r.clone())),
            );
            tally.check("refine", !ask(&judge, refine.text)?.trim().is_empty());
            point_r.push(r);
            if let Some(rf) = rf {
                point_rf.push(rf);
            }
        }
        if point_r.len() >= 2 {
            let (a, b) = (&samples[0].text, &samples[1].text);
            let raw = ask(
                &judge,
                kit.render_p2p(&q.text, reference, a, b, &point_r[0], &point_r[1], &dims)
                    .map_err(err)?,
            )?;
            let pr = pair(&raw, Grounding::Referenced);
            tally.check("p2p_r", pr.is_some());
            if let Some(pr) = &pr {
                let payload = R2rfPayload::Pair {
                    sample_1: a,
                    sample_2: b,
                    critique: pr,
                };
                let raw = ask(
                    &judge,
                    kit.render_r2rf(&q.text, reference, payload).map_err(err)?,
                )?;
                tally.check("r2rf_pair", pair(&raw, Grounding::ReferenceFree).is_some());
            }
            if point_rf.len() >= 2 {
                let raw = ask(
                    &judge,
                    kit.render_p2p(&q.text, None, a, b, &point_rf[0], &point_rf[1], &dims)
                        .map_err(err)?,
                )?;
                tally.check("p2p_rf", pair(&raw, Grounding::ReferenceFree).is_some());
            }
            for (setting, g) in [
                (EvalSetting::PAIR_R, Grounding::Referenced),
                (EvalSetting::PAIR_RF, Grounding::ReferenceFree),
            ] {
                let raw = ask(
                    &judge,
                    kit.render_sft_input(setting, &q.text, reference, &[a, b], &dims)
                        .map_err(err)?,
                )?;
                tally.check(setting.tag(), pair(&raw, g).is_some());
            }
            let input = EvalInput {
                query: q.text.clone(),
                reference: reference.map(String::from),
                samples: vec![a.to_string()],
            };
            let prompt = kit
                .render_critique_quality_judgment(
                    &input,
                    &Critique::Pointwise(point_r[0].clone()),
                    &Critique::Pointwise(point_r[1].clone()),
                )
                .map_err(err)?;
            tally.check(
                "critique_quality",
                pair(&ask(&judge, prompt)?, Grounding::ReferenceFree).is_some(),
            );
        }
    }
    for window in seeds.chunks(3) {
        let raw = ask(&judge, kit.render_query_generation(window, 5).map_err(err)?)?;
        let (queries, warnings) = parse_augmented_queries(&raw);
        tally.check("query_gen", !queries.is_empty() && warnings.is_empty());
        if window.len() == 3 {
            let raw = ask(&judge, kit.render_difficulty_scoring(window).map_err(err)?)?;
            let (rated, warnings) = parse_augmented_queries(&raw);
            tally.check(
                "difficulty",
                rated.len() == 3
                    && warnings.is_empty()
                    && rated.iter().all(|r| r.difficulty.is_some()),
            );
        }
    }
    Ok(())
}

fn criterion_9() -> Outcome {
    let mut per_locale = Vec::new();
    for locale in Locale::ALL {
        let mut tally = Tally {
            total: 0,
            failures: Vec::new(),
        };
        closure_for(locale, &mut tally)?;
        ensure!(
            tally.failures.is_empty(),
            "{}: {} of {} rejected, e.g. {:?}",
            locale.tag(),
            tally.failures.len(),
            tally.total,
            &tally.failures[..tally.failures.len().min(5)]
        );
        per_locale.push(format!("{} {}/{}", locale.tag(), tally.total, tally.total));
    }
    Ok(format!(
        "all 13 prompt kinds accepted: {}",
        per_locale.join(", ")
    ))
}

// ---------- 10. determinism ----------

fn build_once(data: &Path, run_dir: &Path) -> Result<(), String> {
    let mut config = Config {
        seed: 21,
        backend: BackendKind::Mock,
        max_inflight: 8,
        ..Default::default()
    };
    config.oracle.qualities = Some(data.join("qualities.jsonl"));
    config.build.queries = data.join("queries.jsonl");
    config.build.samples = data.join("samples.jsonl");
    config.build.run_dir = run_dir.to_path_buf();
    config.mock.rules = vec![MockRule {
        contains: "model-2对问题3".into(),
        reply: "分析。\n{'综合得分': 7".into(),
    }];
    jobs::cmd_build(&config, &BuildOptions::default())
        .map(|_| ())
        .map_err(|e| e.to_string())
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let config = Config {
        seed: 21,
        ..Default::default()
    };
    jobs::write_synth(
        &data,
        &config,
        SynthSpec {
            queries: 12,
            models_per_query: 4,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    build_once(&data, &a)?;
    build_once(&data, &b)?;
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    ensure!(
        names.len() == 12,
        "expected 12 run files, found {}",
        names.len()
    );
    for name in &names {
        let (x, y) = (
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).map_err(|e| e.to_string())?,
        );
        ensure!(x == y, "{name:?} differs between runs");
    }
    let drops = std::fs::read_to_string(a.join("point_r.drops.jsonl")).unwrap();
    ensure!(
        !drops.is_empty(),
        "scripted malformed reply was not dropped"
    );
    Ok(format!(
        "{} files byte-identical across two builds",
        names.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("metric oracle equivalence", criterion_1),
        ("text/system-level decomposition", criterion_2),
        ("agreement/consistency bookkeeping", criterion_3),
        ("pipeline conservation", criterion_4),
        ("cross-validation statistics", criterion_5),
        ("parser fixture corpus", criterion_6),
        ("swap-augmentation involution", criterion_7),
        ("self-consistency contract", criterion_8),
        ("grammar closure", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
