//! Human-normalized scores, aggregate statistics and stratified bootstrap
//! confidence intervals.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(raw − random) / (human − random)`.
pub fn normalize(raw: f64, random: f64, human: f64) -> Result<f64> {
    if human == random {
        return Err(Error::DegenerateBaseline {
            game: String::from("<unnamed>"),
        });
    }
    Ok((raw - random) / (human - random))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Mean,
    Median,
    Iqm,
    OptimalityGap,
}

impl Statistic {
    pub const ALL: [Statistic; 4] = [Statistic::Mean, Statistic::Median, Statistic::Iqm, Statistic::OptimalityGap];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Median => "median",
            Statistic::Iqm => "iqm",
            Statistic::OptimalityGap => "optimality_gap",
        }
    }
}

impl std::str::FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Statistic::Mean),
            "median" => Ok(Statistic::Median),
            "iqm" => Ok(Statistic::Iqm),
            "optimality_gap" | "gap" => Ok(Statistic::OptimalityGap),
            other => Err(Error::Config(format!(
                "unknown statistic {other:?} (expected mean, median, iqm or optimality_gap)"
            ))),
        }
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean of the middle half of the sorted values. Each value covers a unit
/// interval of mass; mass below `n/4` and above `3n/4` is discarded, so
/// boundary values count fractionally.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("iqm of an empty set".into()));
    }
    let v = sorted(values);
    let n = v.len() as f64;
    let (lo, hi) = (n / 4.0, 3.0 * n / 4.0);
    let mut acc = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let overlap = ((i + 1) as f64).min(hi) - (i as f64).max(lo);
        if overlap > 0.0 {
            acc += overlap * x;
        }
    }
    Ok(acc / (hi - lo))
}

pub fn aggregate(values: &[f64], statistic: Statistic) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract(format!("{} of an empty set", statistic.name())));
    }
    let n = values.len();
    Ok(match statistic {
        Statistic::Mean => values.iter().sum::<f64>() / n as f64,
        Statistic::Median => {
            let v = sorted(values);
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        }
        Statistic::Iqm => iqm(values)?,
        Statistic::OptimalityGap => values.iter().map(|x| (1.0 - x).max(0.0)).sum::<f64>() / n as f64,
    })
}

/// Games scoring strictly above human level.
pub fn superhuman_count(per_game: &[f64]) -> usize {
    per_game.iter().filter(|&&x| x > 1.0).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub game: String,
    pub run: String,
    pub score: f64,
}

/// Raw returns keyed by `(game, run)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(rows: Vec<ScoreRow>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !seen.insert((r.game.as_str(), r.run.as_str())) {
                return Err(Error::Contract(format!("duplicate (game, run) = ({}, {})", r.game, r.run)));
            }
            if !r.score.is_finite() {
                return Err(Error::Contract(format!("non-finite score for ({}, {})", r.game, r.run)));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ScoreRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Raw scores grouped by game, in game order.
    pub fn by_game(&self) -> BTreeMap<&str, Vec<f64>> {
        let mut m: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            m.entry(r.game.as_str()).or_default().push(r.score);
        }
        m
    }

    /// Reads `game,run,score` (extra columns ignored).
    pub fn from_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            game: String,
            run: String,
            score: f64,
        }
        let rows: Vec<Row> = read_csv(path)?;
        if rows.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "no score rows".into(),
            });
        }
        Self::new(
            rows.into_iter()
                .map(|r| ScoreRow {
                    game: r.game,
                    run: r.run,
                    score: r.score,
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub random: f64,
    pub human: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BaselineTable {
    games: BTreeMap<String, Baseline>,
}

impl BaselineTable {
    pub fn new(games: BTreeMap<String, Baseline>) -> Result<Self> {
        for (game, b) in &games {
            if b.human == b.random {
                return Err(Error::DegenerateBaseline { game: game.clone() });
            }
        }
        Ok(Self { games })
    }

    pub fn get(&self, game: &str) -> Option<&Baseline> {
        self.games.get(game)
    }

    pub fn normalize(&self, game: &str, raw: f64) -> Result<f64> {
        let b = self
            .get(game)
            .ok_or_else(|| Error::Contract(format!("no baseline for game {game:?}")))?;
        normalize(raw, b.random, b.human).map_err(|_| Error::DegenerateBaseline { game: game.into() })
    }

    /// Reads `game,random,human`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            game: String,
            random: f64,
            human: f64,
        }
        let rows: Vec<Row> = read_csv(path)?;
        if rows.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "no baseline rows".into(),
            });
        }
        let mut games = BTreeMap::new();
        for r in rows {
            if games
                .insert(
                    r.game.clone(),
                    Baseline {
                        random: r.random,
                        human: r.human,
                    },
                )
                .is_some()
            {
                return Err(Error::Contract(format!("duplicate baseline for {}", r.game)));
            }
        }
        Self::new(games)
    }
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let mut out = Vec::new();
    for rec in reader.deserialize() {
        match rec {
            Ok(r) => out.push(r),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(parse_err(line, e.to_string()));
            }
        }
    }
    Ok(out)
}

/// Normalized scores grouped by game.
pub fn normalized_by_game(table: &ScoreTable, baselines: &BaselineTable) -> Result<BTreeMap<String, Vec<f64>>> {
    table
        .by_game()
        .into_iter()
        .map(|(game, raw)| {
            let norm = raw
                .iter()
                .map(|&x| baselines.normalize(game, x))
                .collect::<Result<Vec<_>>>()?;
            Ok((game.to_string(), norm))
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Point estimate over normalized scores grouped by game. Mean and median
/// use per-game means; IQM and optimality gap use every run-level score.
/// With one run per game the two coincide.
pub fn statistic_of_groups(groups: &[Vec<f64>], statistic: Statistic) -> Result<f64> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::Contract("every game needs at least one run".into()));
    }
    match statistic {
        Statistic::Mean | Statistic::Median => {
            let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
            aggregate(&means, statistic)
        }
        Statistic::Iqm | Statistic::OptimalityGap => {
            let all: Vec<f64> = groups.iter().flatten().copied().collect();
            aggregate(&all, statistic)
        }
    }
}

pub fn point_estimate(table: &ScoreTable, baselines: &BaselineTable, statistic: Statistic) -> Result<f64> {
    let groups: Vec<Vec<f64>> = normalized_by_game(table, baselines)?.into_values().collect();
    statistic_of_groups(&groups, statistic)
}

/// Statistic of every bootstrap replicate, in replicate order. Replicate `r`
/// draws from its own stream of a generator seeded with `seed`, so the
/// result does not depend on evaluation order.
pub fn bootstrap_replicates(groups: &[Vec<f64>], statistic: Statistic, replicates: usize, seed: u64) -> Result<Vec<f64>> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::Contract("empty stratum in bootstrap".into()));
    }
    let mut resampled: Vec<Vec<f64>> = groups.iter().map(|g| vec![0.0; g.len()]).collect();
    (0..replicates)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            for (dst, src) in resampled.iter_mut().zip(groups) {
                for slot in dst.iter_mut() {
                    *slot = src[rng.gen_range(0..src.len())];
                }
            }
            statistic_of_groups(&resampled, statistic)
        })
        .collect()
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Percentile interval over replicates that resample runs with replacement
/// within each game. The interval is widened if needed to contain the point.
pub fn bootstrap_groups(
    groups: &[Vec<f64>],
    statistic: Statistic,
    replicates: usize,
    confidence: f64,
    seed: u64,
) -> Result<Interval> {
    if replicates < 100 {
        return Err(Error::Contract(format!("need at least 100 replicates, got {replicates}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Contract(format!("confidence must be in (0,1), got {confidence}")));
    }
    let point = statistic_of_groups(groups, statistic)?;
    let reps = sorted(&bootstrap_replicates(groups, statistic, replicates, seed)?);
    let alpha = 1.0 - confidence;
    Ok(Interval {
        point,
        lower: quantile(&reps, alpha / 2.0).min(point),
        upper: quantile(&reps, 1.0 - alpha / 2.0).max(point),
    })
}

pub fn stratified_bootstrap_ci(
    table: &ScoreTable,
    baselines: &BaselineTable,
    statistic: Statistic,
    replicates: usize,
    confidence: f64,
    seed: u64,
) -> Result<Interval> {
    let groups: Vec<Vec<f64>> = normalized_by_game(table, baselines)?.into_values().collect();
    bootstrap_groups(&groups, statistic, replicates, confidence, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub games: usize,
    pub runs: usize,
    pub replicates: usize,
    pub confidence: f64,
    pub seed: u64,
    pub statistics: BTreeMap<Statistic, Interval>,
    pub superhuman_count: usize,
    /// Normalized per-game means.
    pub per_game: BTreeMap<String, f64>,
}

pub fn aggregate_report(
    table: &ScoreTable,
    baselines: &BaselineTable,
    statistics: &[Statistic],
    replicates: usize,
    confidence: f64,
    seed: u64,
) -> Result<AggregateReport> {
    let by_game = normalized_by_game(table, baselines)?;
    if by_game.is_empty() {
        return Err(Error::Contract("no scores to aggregate".into()));
    }
    let groups: Vec<Vec<f64>> = by_game.values().cloned().collect();
    let per_game: BTreeMap<String, f64> = by_game.iter().map(|(g, v)| (g.clone(), mean(v))).collect();
    let means: Vec<f64> = per_game.values().copied().collect();
    let statistics = statistics
        .iter()
        .map(|&s| Ok((s, bootstrap_groups(&groups, s, replicates, confidence, seed)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(AggregateReport {
        games: groups.len(),
        runs: table.rows().len(),
        replicates,
        confidence,
        seed,
        statistics,
        superhuman_count: superhuman_count(&means),
        per_game,
    })
}
