//! Experiment configuration: a flat sectioned key-value text format chosen so
//! configs diff cleanly in version control.
//!
//! Grammar, one construct per line:
//!
//! ```text
//! # comment                       everything after '#' is ignored
//! kind = simulate                 top level, before any section
//! [section]                       one of: system, initial, run, output
//! key = value                     keys belong to the open section
//! ```
//!
//! Sections, keys, and defaults:
//!
//! | section   | key                 | default      | meaning |
//! |-----------|---------------------|--------------|---------|
//! | (top)     | kind                | (required*)  | experiment kind; may instead come from the CLI subcommand |
//! | system    | balls               | 2            | number of balls, >= 2 |
//! | system    | dimension           | 2            | torus dimension, >= 2 |
//! | system    | masses              | 1 each       | comma list, one positive mass per ball |
//! | system    | radius              | 0.05         | common ball radius |
//! | initial   | source              | random       | `random` (seeded) or `explicit` |
//! | initial   | positions           | -            | explicit only: balls*dimension floats |
//! | initial   | velocities          | -            | explicit only: balls*dimension floats (momentum removed, energy normalized on load) |
//! | run       | horizon             | 5.0          | stop after this much time (when max-collisions = 0) |
//! | run       | max-collisions      | 0            | stop after this many events; 0 defers to horizon |
//! | run       | samples             | 20           | ensemble size for per-seed runners |
//! | run       | seed                | 0            | default master seed; `--seed` overrides |
//! | run       | l-factor            | 10.0         | contraction-search target factor, > 1 |
//! | run       | rich-count          | 2            | richness-scan block count, >= 1 |
//! | run       | speed-scale         | 0.1          | bounds-audit initial relative-speed cap |
//! | run       | gap-tolerance       | 0.25         | subspace convergence tolerance |
//! | run       | horizons            | 5, 10, 20    | subspace pullback horizons, ascending |
//! | run       | segment-collisions  | 6            | sufficiency-scan events per segment |
//! | run       | cos-lo / cos-hi     | 1e-4 / 1e-2  | ansatz-probe approach-cosine window |
//! | run       | ladder-rungs        | 4            | ansatz-probe nested horizons per sample |
//! | output    | dir                 | out          | report directory; `--out` and HARDBALL_OUT override |
//! | output    | series              | false        | also write CSV time series where a runner has one |
//!
//! `parse_config` reports every problem it can find, not just the first;
//! syntax-level problems carry line and column.

use std::fmt;

/// Registered experiment kinds; each names one runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Simulate,
    ConservationAudit,
    QAudit,
    ExpansionAudit,
    Subspace,
    SufficiencyScan,
    RichnessScan,
    BoundsAudit,
    AnsatzProbe,
    ContractionSearch,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 10] = [
        ExperimentKind::Simulate,
        ExperimentKind::ConservationAudit,
        ExperimentKind::QAudit,
        ExperimentKind::ExpansionAudit,
        ExperimentKind::Subspace,
        ExperimentKind::SufficiencyScan,
        ExperimentKind::RichnessScan,
        ExperimentKind::BoundsAudit,
        ExperimentKind::AnsatzProbe,
        ExperimentKind::ContractionSearch,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::ConservationAudit => "conservation-audit",
            ExperimentKind::QAudit => "q-audit",
            ExperimentKind::ExpansionAudit => "expansion-audit",
            ExperimentKind::Subspace => "subspace",
            ExperimentKind::SufficiencyScan => "sufficiency-scan",
            ExperimentKind::RichnessScan => "richness-scan",
            ExperimentKind::BoundsAudit => "bounds-audit",
            ExperimentKind::AnsatzProbe => "ansatz-probe",
            ExperimentKind::ContractionSearch => "contraction-search",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }

    fn registered() -> String {
        Self::ALL.map(|k| k.name()).join(", ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialSource {
    Random,
    Explicit,
}

#[derive(Debug, Clone)]
pub struct SystemBlock {
    pub balls: usize,
    pub dimension: usize,
    pub masses: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct InitialBlock {
    pub source: InitialSource,
    pub positions: Option<Vec<f64>>,
    pub velocities: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunBlock {
    pub horizon: f64,
    pub max_collisions: u64,
    pub samples: u64,
    pub seed: u64,
    pub l_factor: f64,
    pub rich_count: usize,
    pub speed_scale: f64,
    pub gap_tolerance: f64,
    pub horizons: Vec<f64>,
    pub segment_collisions: usize,
    pub cos_lo: f64,
    pub cos_hi: f64,
    pub ladder_rungs: u32,
}

#[derive(Debug, Clone)]
pub struct OutputBlock {
    pub dir: String,
    pub series: bool,
}

/// A parsed and validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Absent when the config leaves the kind to the CLI subcommand.
    pub kind: Option<ExperimentKind>,
    pub system: SystemBlock,
    pub initial: InitialBlock,
    pub run: RunBlock,
    pub output: OutputBlock,
    /// Verbatim source text; echoed and hashed into every report.
    pub raw: String,
}

/// Everything wrong with a config, gathered in one pass.
#[derive(Debug, Clone)]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid config ({} problem(s)):", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/* ---- parsing ---- */

#[derive(Default)]
struct RawValues {
    entries: Vec<(String, String, String, usize)>, // (section, key, value, line)
}

/// Parses and validates; returns the config or every violation found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut problems: Vec<String> = Vec::new();
    let mut raw = RawValues::default();
    let mut section = String::new(); // empty = top level

    for (idx, full_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match full_line.find('#') {
            Some(p) => &full_line[..p],
            None => full_line,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            match rest.strip_suffix(']') {
                Some(name) => {
                    let name = name.trim();
                    if ["system", "initial", "run", "output"].contains(&name) {
                        section = name.to_string();
                    } else {
                        problems.push(format!(
                            "line {lineno}: unknown section [{name}]; expected one of \
                             [system], [initial], [run], [output]"
                        ));
                        section = name.to_string(); // keep scanning its keys
                    }
                }
                None => {
                    let col = line.find('[').map_or(1, |c| c + 1);
                    problems.push(format!(
                        "line {lineno}, column {col}: section header missing closing ']'"
                    ));
                }
            }
            continue;
        }
        match trimmed.split_once('=') {
            Some((key, value)) => {
                let key = key.trim().to_string();
                if key.is_empty() {
                    let col = line.find('=').map_or(1, |c| c + 1);
                    problems.push(format!(
                        "line {lineno}, column {col}: missing key before '='"
                    ));
                    continue;
                }
                if raw
                    .entries
                    .iter()
                    .any(|(s, k, _, _)| *s == section && *k == key)
                {
                    problems.push(format!(
                        "line {lineno}: duplicate key '{key}'{}",
                        in_section(&section)
                    ));
                    continue;
                }
                raw.entries
                    .push((section.clone(), key, value.trim().to_string(), lineno));
            }
            None => {
                let col = line.len().max(1);
                problems.push(format!(
                    "line {lineno}, column {col}: expected 'key = value' or '[section]'"
                ));
            }
        }
    }

    let cfg = assemble(&raw, text, &mut problems);
    match cfg {
        Some(cfg) if problems.is_empty() => Ok(cfg),
        _ => Err(ConfigError { violations: problems }),
    }
}

fn in_section(section: &str) -> String {
    if section.is_empty() {
        String::new()
    } else {
        format!(" in [{section}]")
    }
}

/* ---- typed extraction ---- */

struct Fetch<'a, 'p> {
    raw: &'a RawValues,
    problems: &'p mut Vec<String>,
}

impl<'a> Fetch<'a, '_> {
    fn get(&self, section: &str, key: &str) -> Option<(&'a str, usize)> {
        self.raw
            .entries
            .iter()
            .find(|(s, k, _, _)| s == section && k == key)
            .map(|(_, _, v, l)| (v.as_str(), *l))
    }

    fn number<T: std::str::FromStr>(&mut self, section: &str, key: &str, default: T) -> T {
        match self.get(section, key) {
            None => default,
            Some((v, line)) => v.parse().unwrap_or_else(|_| {
                self.problems.push(format!(
                    "line {line}: '{key}'{} must be a {}",
                    in_section(section),
                    std::any::type_name::<T>()
                        .rsplit("::")
                        .next()
                        .unwrap_or("number")
                ));
                default
            }),
        }
    }

    fn float_list(&mut self, section: &str, key: &str) -> Option<Vec<f64>> {
        let (v, line) = self.get(section, key)?;
        let mut out = Vec::new();
        for part in v.split(',') {
            match part.trim().parse::<f64>() {
                Ok(x) => out.push(x),
                Err(_) => {
                    self.problems.push(format!(
                        "line {line}: '{key}'{} must be a comma-separated list of \
                         numbers; '{}' is not one",
                        in_section(section),
                        part.trim()
                    ));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn flag(&mut self, section: &str, key: &str, default: bool) -> bool {
        match self.get(section, key) {
            None => default,
            Some(("true", _)) => true,
            Some(("false", _)) => false,
            Some((v, line)) => {
                self.problems.push(format!(
                    "line {line}: '{key}'{} must be true or false, got '{v}'",
                    in_section(section)
                ));
                default
            }
        }
    }
}

const KNOWN_KEYS: [(&str, &str); 21] = [
    ("", "kind"),
    ("system", "balls"),
    ("system", "dimension"),
    ("system", "masses"),
    ("system", "radius"),
    ("initial", "source"),
    ("initial", "positions"),
    ("initial", "velocities"),
    ("run", "horizon"),
    ("run", "max-collisions"),
    ("run", "samples"),
    ("run", "seed"),
    ("run", "l-factor"),
    ("run", "rich-count"),
    ("run", "speed-scale"),
    ("run", "gap-tolerance"),
    ("run", "horizons"),
    ("run", "segment-collisions"),
    ("run", "cos-lo"),
    ("run", "cos-hi"),
    ("run", "ladder-rungs"),
];

fn assemble(
    raw: &RawValues,
    text: &str,
    problems: &mut Vec<String>,
) -> Option<ExperimentConfig> {
    // unknown keys, with their locations
    for (section, key, _, line) in &raw.entries {
        let known = KNOWN_KEYS
            .iter()
            .any(|(s, k)| s == section && k == key)
            || (section == "output" && (key == "dir" || key == "series"));
        if !known {
            problems.push(format!(
                "line {line}: unknown key '{key}'{}",
                in_section(section)
            ));
        }
    }

    let mut f = Fetch { raw, problems: &mut *problems };

    let kind = match f.get("", "kind") {
        None => None,
        Some((v, line)) => match ExperimentKind::from_name(v) {
            Some(k) => Some(k),
            None => {
                let msg = format!(
                    "line {line}: unknown experiment kind '{v}'; registered kinds: {}",
                    ExperimentKind::registered()
                );
                f.problems.push(msg);
                None
            }
        },
    };

    let balls: usize = f.number("system", "balls", 2);
    let dimension: usize = f.number("system", "dimension", 2);
    let masses = f
        .float_list("system", "masses")
        .unwrap_or_else(|| vec![1.0; balls.max(1)]);
    let radius: f64 = f.number("system", "radius", 0.05);

    let source = match f.get("initial", "source") {
        None | Some(("random", _)) => InitialSource::Random,
        Some(("explicit", _)) => InitialSource::Explicit,
        Some((v, line)) => {
            let msg =
                format!("line {line}: 'source' in [initial] must be random or explicit, got '{v}'");
            f.problems.push(msg);
            InitialSource::Random
        }
    };
    let positions = f.float_list("initial", "positions");
    let velocities = f.float_list("initial", "velocities");

    let run = RunBlock {
        horizon: f.number("run", "horizon", 5.0),
        max_collisions: f.number("run", "max-collisions", 0),
        samples: f.number("run", "samples", 20),
        seed: f.number("run", "seed", 0),
        l_factor: f.number("run", "l-factor", 10.0),
        rich_count: f.number("run", "rich-count", 2),
        speed_scale: f.number("run", "speed-scale", 0.1),
        gap_tolerance: f.number("run", "gap-tolerance", 0.25),
        horizons: f
            .float_list("run", "horizons")
            .unwrap_or_else(|| vec![5.0, 10.0, 20.0]),
        segment_collisions: f.number("run", "segment-collisions", 6),
        cos_lo: f.number("run", "cos-lo", 1e-4),
        cos_hi: f.number("run", "cos-hi", 1e-2),
        ladder_rungs: f.number("run", "ladder-rungs", 4),
    };

    let dir = f
        .get("output", "dir")
        .map_or_else(|| "out".to_string(), |(v, _)| v.to_string());
    let series = f.flag("output", "series", false);

    // semantic validation, all findings appended
    if balls < 2 {
        problems.push("'balls' must be at least 2".into());
    }
    if dimension < 2 {
        problems.push("'dimension' must be at least 2".into());
    }
    if masses.len() != balls {
        problems.push(format!(
            "'masses' lists {} values but 'balls' is {balls}",
            masses.len()
        ));
    }
    if masses.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
        problems.push("masses must be positive".into());
    }
    if !(radius > 0.0) || !radius.is_finite() {
        problems.push("'radius' must be positive".into());
    }
    match source {
        InitialSource::Explicit => {
            let want = balls * dimension;
            match &positions {
                None => problems.push("explicit initial state needs 'positions'".into()),
                Some(p) if p.len() != want => problems.push(format!(
                    "'positions' lists {} values but balls*dimension is {want}",
                    p.len()
                )),
                _ => {}
            }
            match &velocities {
                None => problems.push("explicit initial state needs 'velocities'".into()),
                Some(v) if v.len() != want => problems.push(format!(
                    "'velocities' lists {} values but balls*dimension is {want}",
                    v.len()
                )),
                _ => {}
            }
        }
        InitialSource::Random => {
            if positions.is_some() || velocities.is_some() {
                problems.push(
                    "'positions'/'velocities' are only allowed with source = explicit"
                        .into(),
                );
            }
        }
    }
    for (name, value) in [
        ("horizon", run.horizon),
        ("speed-scale", run.speed_scale),
        ("gap-tolerance", run.gap_tolerance),
    ] {
        if !(value > 0.0) || !value.is_finite() {
            problems.push(format!("'{name}' must be positive"));
        }
    }
    if !(run.l_factor > 1.0) {
        problems.push("'l-factor' must exceed 1".into());
    }
    if run.rich_count < 1 {
        problems.push("'rich-count' must be at least 1".into());
    }
    if run.ladder_rungs < 1 {
        problems.push("'ladder-rungs' must be at least 1".into());
    }
    if run.segment_collisions < 1 {
        problems.push("'segment-collisions' must be at least 1".into());
    }
    if run.horizons.is_empty() || run.horizons.iter().any(|h| !(*h > 0.0)) {
        problems.push("'horizons' must be a nonempty list of positive times".into());
    } else if run.horizons.windows(2).any(|w| w[0] >= w[1]) {
        problems.push("'horizons' must be strictly ascending".into());
    }
    if !(run.cos_lo > 0.0 && run.cos_lo <= run.cos_hi && run.cos_hi < 1.0) {
        problems.push("approach-cosine window needs 0 < cos-lo <= cos-hi < 1".into());
    }

    Some(ExperimentConfig {
        kind,
        system: SystemBlock { balls, dimension, masses, radius },
        initial: InitialBlock { source, positions, velocities },
        run,
        output: OutputBlock { dir, series },
        raw: text.to_string(),
    })
}

/* ---- tests ---- */
