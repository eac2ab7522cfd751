use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use rankmm::model::{Link, ModelConfig, ParameterVector, VarianceComponents};
use rankmm::oracle::{self, LeagueShape};
use rankmm::report::{compare_rankings, emit_plot_data, emit_table};
use rankmm::schedule::{
    self, build_design, detect_separation, ColumnMapping, DesignMatrices, FcsMode, GameRecord, Roster,
};
use rankmm::verify::{run_verification, VerifyOptions};

use crate::error::{CliError, CliResult};
use crate::result_file::{method_name, FileDigest, ResultFile, RunManifest};
use crate::{BiasStudyArgs, CompareArgs, FitArgs, IngestArgs, SimulateArgs, TruthArgs, VerifyArgs};

fn read_input(path: &Path) -> CliResult<(String, FileDigest)> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let digest = FileDigest::of_bytes(&path.display().to_string(), &bytes);
    let text = String::from_utf8(bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((text, digest))
}

fn write_output(path: &Path, text: &str) -> CliResult<FileDigest> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(FileDigest::of_bytes(&path.display().to_string(), text.as_bytes()))
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// Games, roster and their digests, cleaned and cut off at `cutoff`.
fn load_season(
    games: &[PathBuf],
    roster: &Path,
    mapping: Option<&Path>,
    cutoff: Option<NaiveDate>,
) -> CliResult<(Vec<GameRecord>, Roster, Vec<FileDigest>)> {
    let mut inputs = Vec::new();
    let (roster_text, d) = read_input(roster)?;
    inputs.push(d);
    let roster = schedule::parse_roster(&roster_text)?;
    let mapping = match mapping {
        Some(p) => {
            let (text, d) = read_input(p)?;
            inputs.push(d);
            Some(ColumnMapping::from_key_value(&text)?)
        }
        None => None,
    };
    let mut raw = Vec::new();
    for path in games {
        let (text, d) = read_input(path)?;
        inputs.push(d);
        let m = mapping.clone().unwrap_or_else(|| ColumnMapping::detect(&text));
        let recs = schedule::parse_games(&text, &m).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        raw.extend(recs);
    }
    let records = schedule::preprocess_raw(&raw, &roster, cutoff.unwrap_or(NaiveDate::MAX))?;
    Ok((records, roster, inputs))
}

pub fn ingest(a: &IngestArgs, timing: bool) -> CliResult<()> {
    let start = Instant::now();
    let (records, _, inputs) = load_season(&a.games, &a.roster, a.mapping.as_deref(), a.cutoff)?;
    let out = write_output(&a.out, &schedule::write_games(&records))?;
    let sep = detect_separation(&records);
    eprintln!(
        "{} games written to {} ({} FBS-FCS games, {} won by the visitor)",
        records.len(),
        a.out.display(),
        sep.cross_division_games,
        sep.fcs_wins
    );
    let mut manifest = RunManifest::new("ingest");
    manifest.cutoff = a.cutoff.map(|d| d.to_string());
    manifest.inputs = inputs;
    manifest.outputs = vec![out];
    manifest.timing_ms = timing.then(|| elapsed_ms(start));
    let path = a.manifest.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".manifest.toml");
        PathBuf::from(p)
    });
    write_output(&path, &manifest.to_toml()?)?;
    Ok(())
}

pub fn fit(a: &FitArgs, timing: bool) -> CliResult<()> {
    let config = ModelConfig::new(a.link, a.fcs_mode, a.method)?;
    let start = Instant::now();
    let (records, roster, inputs) =
        load_season(std::slice::from_ref(&a.games), &a.roster, a.mapping.as_deref(), a.cutoff)?;
    if config.fcs_mode.has_fixed_effect() {
        let sep = detect_separation(&records);
        if let Some(advice) = sep.recommendation {
            return Err(CliError::Data(format!("the FCS effect is not estimable: {advice}")));
        }
    }
    let built = build_design(&records, &roster, config.fcs_mode)?;
    let result = rankmm::fit(&built.design, &built.outcomes, &config)?;

    let mut manifest = RunManifest::new("fit");
    manifest.cutoff = a.cutoff.map(|d| d.to_string());
    manifest.models = vec![config.label()];
    manifest.inputs = inputs;
    manifest.option("link", format!("{:?}", a.link).to_lowercase());
    manifest.option("fcs_mode", a.fcs_mode.digit());
    manifest.option("method", method_name(a.method));
    manifest.timing_ms = timing.then(|| elapsed_ms(start));
    let file = ResultFile::from_fit(&result, &built.index, manifest);
    if let Some(out) = &a.out {
        write_output(out, &file.to_toml()?)?;
    }
    let mut table = file.ranking(a.teams)?;
    if let Some(k) = a.top {
        table = table.top(k);
    }
    print!("{}", emit_table(&table, a.format));
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if !result.converged {
        return Err(CliError::Convergence(format!(
            "{} did not converge after {} iterations",
            config.label(),
            result.iterations
        )));
    }
    Ok(())
}

pub fn compare(a: &CompareArgs) -> CliResult<()> {
    let fa = ResultFile::read(&a.a)?;
    let fb = ResultFile::read(&a.b)?;
    let ta = fa.ranking(a.teams)?;
    let tb = fb.ranking(a.teams)?;
    let cmp = compare_rankings(&ta, &tb, a.top);
    print!("{}", emit_table(&cmp, a.format));
    if let Some(kind) = a.plot {
        let (pa, pb) = match a.top {
            Some(k) => (ta.top(k), tb.top(k)),
            None => (ta, tb),
        };
        let penalty = fa.estimates.penalty_prior || fb.estimates.penalty_prior;
        let data = emit_plot_data(&[&pa, &pb], kind, penalty)?;
        match &a.plot_out {
            Some(p) => {
                write_output(p, &data)?;
            }
            None => print!("\n{data}"),
        }
    }
    Ok(())
}

pub fn verify(a: &VerifyArgs) -> CliResult<()> {
    let opts = VerifyOptions {
        dims: a.dims,
        trials: a.trials,
        max_games: a.max_games,
        seed: a.seed,
        nodes: a.nodes,
        ..VerifyOptions::default()
    };
    let report = run_verification(&opts)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        write_output(out, &text)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Verification("oracle verification failed".into()))
    }
}

enum Template {
    League,
    Circulant { teams: usize, k: usize },
}

fn parse_template(s: &str) -> CliResult<Template> {
    if s == "league" {
        return Ok(Template::League);
    }
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["circulant", n, k] => match (n.parse(), k.parse()) {
            (Ok(teams), Ok(k)) => Ok(Template::Circulant { teams, k }),
            _ => Err(CliError::Usage(format!("bad circulant template `{s}`"))),
        },
        _ => Err(CliError::Usage(format!(
            "unknown template `{s}` (league | circulant:<teams>:<k>)"
        ))),
    }
}

fn true_params(t: &TruthArgs, template: &Template) -> CliResult<ParameterVector> {
    if !(t.sigma2 >= 0.0 && t.sigma2.is_finite()) {
        return Err(CliError::Usage(format!("variance must be non-negative, got {}", t.sigma2)));
    }
    Ok(match template {
        Template::Circulant { .. } => ParameterVector {
            beta: None,
            variance: VarianceComponents::Pooled(t.sigma2),
        },
        Template::League => ParameterVector {
            beta: Some(t.beta),
            variance: match t.sigma2_fcs {
                Some(fcs) => VarianceComponents::Separate { fbs: t.sigma2, fcs },
                None => VarianceComponents::Pooled(t.sigma2),
            },
        },
    })
}

fn season_start() -> NaiveDate {
    LeagueShape::default().season_start
}

fn circulant_names(n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (1..=n).map(|i| format!("Team {i:0width$}")).collect()
}

struct Simulated {
    design: DesignMatrices,
    records: Vec<GameRecord>,
    roster: Roster,
    names: Vec<String>,
    true_eta: Vec<f64>,
}

fn simulate_template(template: &Template, params: &ParameterVector, link: Link, seed: u64) -> CliResult<Simulated> {
    match *template {
        Template::League => {
            let (records, roster, season) = oracle::synthetic_league(&LeagueShape::default(), params, link, seed)?;
            let p = season.design.fbs_cols();
            // zero-padded names sort in column order within each division
            let (mut fbs, mut fcs): (Vec<String>, Vec<String>) = (Vec::new(), Vec::new());
            for (name, d) in &roster {
                match d {
                    schedule::Division::Fbs => fbs.push(name.clone()),
                    schedule::Division::Fcs => fcs.push(name.clone()),
                }
            }
            debug_assert_eq!(fbs.len(), p);
            let names = fbs.into_iter().chain(fcs).collect();
            Ok(Simulated {
                design: season.design,
                records,
                roster,
                names,
                true_eta: season.true_eta.iter().copied().collect(),
            })
        }
        Template::Circulant { teams, k } => {
            let design = oracle::circulant_schedule(teams, k)?;
            let season = oracle::simulate_season(&design, params, link, seed, 0);
            let names = circulant_names(teams);
            let (records, roster) = oracle::season_records(&design, &names, &season.outcomes, season_start())?;
            Ok(Simulated {
                design,
                records,
                roster,
                names,
                true_eta: season.true_eta.iter().copied().collect(),
            })
        }
    }
}

pub fn simulate(a: &SimulateArgs, timing: bool) -> CliResult<()> {
    let start = Instant::now();
    let template = parse_template(&a.truth.template)?;
    let params = true_params(&a.truth, &template)?;
    let sim = simulate_template(&template, &params, a.truth.link, a.truth.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut truth = String::from("team,division,eta\n");
    for (j, name) in sim.names.iter().enumerate() {
        truth.push_str(&format!("{name},{},{:.12}\n", sim.roster[name], sim.true_eta[j]));
    }
    let outputs = vec![
        write_output(&a.out_dir.join("games.csv"), &schedule::write_games(&sim.records))?,
        write_output(&a.out_dir.join("roster.csv"), &schedule::write_roster(&sim.roster))?,
        write_output(&a.out_dir.join("truth.csv"), &truth)?,
    ];
    let mut manifest = RunManifest::new("simulate");
    manifest.seed = Some(a.truth.seed);
    describe_truth(&mut manifest, &a.truth, &params);
    manifest.outputs = outputs;
    manifest.timing_ms = timing.then(|| elapsed_ms(start));
    write_output(&a.out_dir.join("manifest.toml"), &manifest.to_toml()?)?;
    eprintln!("{} games, {} teams written to {}", sim.records.len(), sim.names.len(), a.out_dir.display());
    Ok(())
}

fn describe_truth(manifest: &mut RunManifest, t: &TruthArgs, params: &ParameterVector) {
    manifest.option("template", &t.template);
    manifest.option("link", format!("{:?}", t.link).to_lowercase());
    if let Some(b) = params.beta {
        manifest.option("beta", b);
    }
    for (k, v) in ["sigma2", "sigma2_fcs"].iter().zip(params.variance.values()) {
        manifest.option(k, v);
    }
}

pub fn bias_study(a: &BiasStudyArgs, timing: bool) -> CliResult<()> {
    let start = Instant::now();
    let template = parse_template(&a.truth.template)?;
    let mode = match (&template, a.fcs_mode) {
        (Template::Circulant { .. }, None | Some(FcsMode::Consolidated)) => FcsMode::Consolidated,
        (Template::Circulant { .. }, Some(_)) => {
            return Err(CliError::Usage("circulant templates have no FCS teams; use --fcs-mode 0".into()))
        }
        (Template::League, None) => FcsMode::Pooled,
        (Template::League, Some(FcsMode::Consolidated)) => {
            return Err(CliError::Usage("the league template is fitted with --fcs-mode 1 or 2".into()))
        }
        (Template::League, Some(m)) => m,
    };
    let configs = a
        .methods
        .iter()
        .map(|&m| ModelConfig::new(a.truth.link, mode, m))
        .collect::<rankmm::Result<Vec<_>>>()?;
    let params = true_params(&a.truth, &template)?;
    let design = match template {
        Template::League => simulate_template(&template, &params, a.truth.link, a.truth.seed)?.design,
        Template::Circulant { teams, k } => oracle::circulant_schedule(teams, k)?,
    };
    let study = oracle::bias_study(&design, &params, a.truth.link, &configs, a.reps, a.truth.seed)?;
    let text = study.to_delimited();
    let mut manifest = RunManifest::new("bias-study");
    manifest.seed = Some(a.truth.seed);
    manifest.models = configs.iter().map(ModelConfig::label).collect();
    describe_truth(&mut manifest, &a.truth, &params);
    manifest.option("replications", a.reps);
    match &a.out {
        Some(out) => manifest.outputs.push(write_output(out, &text)?),
        None => print!("{text}"),
    }
    manifest.timing_ms = timing.then(|| elapsed_ms(start));
    if let Some(path) = &a.manifest {
        write_output(path, &manifest.to_toml()?)?;
    }
    Ok(())
}
