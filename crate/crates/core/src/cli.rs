//! Command-line front end: analyses, round trips with convergence tables,
//! and OBJ export. Reports are JSON documents with a versioned schema.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::congruence::{AnalysisConfig, CongruenceAnalysis, ResidualKind, GUARD_BAND};
use crate::error::{Error, Result};
use crate::grid::{fitted_slope, FdOrder, Summary};
use crate::minkowski::DEFAULT_TOL;
use crate::reconstruct::{
    check_hypotheses, classify_unchecked, reconstruct, roundtrip_error, Branch, HypothesisCheck,
    ReconstructionResult, RoundtripReport,
};
use crate::surfaces::{make_chart, Family, LiftedChart};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "cgauss", version, about = "Conformal Gauss maps: analysis, reconstruction and export")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Residuals, hypothesis checks and rank classification.
    Analyze(CommonArgs),
    /// Analysis plus reconstruction and round-trip error; `--refine` adds a convergence table.
    Roundtrip(RoundtripArgs),
    /// Reconstruction plus OBJ meshes of the input surface and the recovered lines.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Surface family, e.g. `clifford`, `torus:r=0.6`, `flat_torus:a=0.55`.
    #[arg(long)]
    pub surface: Family,
    /// Dimension of the target sphere (defaults to the family's own).
    #[arg(long)]
    pub n: Option<usize>,
    /// Grid size `NxM`.
    #[arg(long, default_value = "64x64", value_parser = parse_grid)]
    pub grid: (usize, usize),
    #[arg(long, default_value = "2")]
    pub fd_order: FdOrder,
    /// Relative singular-value threshold for ranks.
    #[arg(long, default_value_t = AnalysisConfig::default().rank_tol)]
    pub tol_rank: f64,
    /// Bound on the residuals that the reconstruction hypotheses require.
    #[arg(long, default_value_t = AnalysisConfig::default().hypothesis_tol)]
    pub tol_hyp: f64,
    /// Where to write the JSON report (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RoundtripArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated square grid sizes for a convergence study.
    #[arg(long, value_delimiter = ',')]
    pub refine: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory for the meshes.
    #[arg(long)]
    pub mesh: PathBuf,
}

pub fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected NxM, got `{s}`"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

#[derive(Clone, Debug, Serialize)]
pub struct Tolerances {
    pub linear_algebra: f64,
    pub rank: f64,
    pub guard_band_factor: f64,
    pub hypothesis: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Metadata {
    pub family: String,
    pub params: BTreeMap<String, f64>,
    pub n: usize,
    pub grid: [usize; 2],
    pub fd_order: FdOrder,
    pub tolerances: Tolerances,
    pub library_version: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct Classification {
    /// Counts per rank and per mask reason; sums to the grid size.
    pub histogram: BTreeMap<String, usize>,
    pub n10_rank_histogram: BTreeMap<String, usize>,
    pub set_a_points: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconstructionSummary {
    pub branch_counts: BTreeMap<Branch, usize>,
    pub dominant_branch: Option<Branch>,
    pub infinitely_many: bool,
    pub constancy_deviation: Option<f64>,
    pub stability: Summary,
    pub line_immersion: Vec<Summary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RoundtripSummary {
    pub error: Summary,
    pub dual_error: Summary,
    pub polar_error: Summary,
    /// Which oracle the second line of a dual pair matches within the hypothesis tolerance.
    pub dual_matches: BTreeMap<&'static str, bool>,
    pub relabeled: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceTable {
    pub grids: Vec<usize>,
    pub h: Vec<f64>,
    pub rows: BTreeMap<String, Vec<f64>>,
    /// Least-squares slope of log(value) against log(h); null when values vanish.
    pub slopes: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub command: &'static str,
    pub metadata: Metadata,
    pub residuals: BTreeMap<&'static str, Summary>,
    pub hypotheses: Vec<HypothesisCheck>,
    pub classification: Classification,
    pub error: Option<String>,
    pub reconstruction: Option<ReconstructionSummary>,
    pub roundtrip: Option<RoundtripSummary>,
    pub convergence: Option<ConvergenceTable>,
    pub checks_passed: bool,
}

impl ReportDocument {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

fn config_of(args: &CommonArgs) -> AnalysisConfig {
    AnalysisConfig {
        fd_order: args.fd_order,
        tol: DEFAULT_TOL,
        rank_tol: args.tol_rank,
        hypothesis_tol: args.tol_hyp,
    }
}

/// Chart of the requested family, padded into `S^n` if asked.
pub fn chart_of(args: &CommonArgs, nu: usize, nv: usize) -> Result<LiftedChart> {
    let chart = make_chart(args.surface, nu, nv)?;
    match args.n {
        Some(n) if n != chart.n() => chart.with_ambient(n),
        _ => Ok(chart),
    }
}

/// A finite copy of a summary, so the report is valid JSON.
fn finite(s: Summary) -> Summary {
    let f = |x: f64| if x.is_finite() { x } else { f64::MAX };
    Summary {
        max: f(s.max),
        mean: f(s.mean),
        count: s.count,
    }
}

struct Run {
    chart: LiftedChart,
    analysis: CongruenceAnalysis,
    hypotheses: Vec<HypothesisCheck>,
    result: std::result::Result<ReconstructionResult, Error>,
    roundtrip: Option<RoundtripReport>,
    classification: Classification,
}

fn run(args: &CommonArgs, nu: usize, nv: usize, with_reconstruction: bool) -> Result<Run> {
    let chart = chart_of(args, nu, nv)?;
    let analysis = CongruenceAnalysis::of_chart(&chart, config_of(args));
    let hypotheses = check_hypotheses(&analysis);
    let cls = classify_unchecked(&analysis);
    let mut n10_hist = BTreeMap::new();
    for r in analysis.n10_rank.iter().flatten() {
        *n10_hist.entry(format!("rank_{r}")).or_insert(0) += 1;
    }
    let classification = Classification {
        histogram: cls.histogram(),
        n10_rank_histogram: n10_hist,
        set_a_points: analysis.set_a.iter().filter(|a| **a == Some(true)).count(),
    };
    let hyp_ok = hypotheses.iter().all(|h| h.passed);
    let result = if !hyp_ok {
        Err(hypotheses
            .iter()
            .find(|h| !h.passed)
            .map(|h| Error::Hypothesis {
                hypothesis: h.name,
                i: h.at.0,
                j: h.at.1,
                value: h.worst,
                threshold: h.threshold,
            })
            .expect("a failed hypothesis"))
    } else if with_reconstruction {
        reconstruct(&analysis, &cls)
    } else {
        Err(Error::Unsupported("reconstruction not requested".into()))
    };
    let roundtrip = result.as_ref().ok().map(|r| roundtrip_error(&chart, r));
    Ok(Run {
        chart,
        analysis,
        hypotheses,
        result,
        roundtrip,
        classification,
    })
}

fn document(command: &'static str, args: &CommonArgs, r: &Run, with_reconstruction: bool) -> ReportDocument {
    let cfg = r.analysis.config;
    let residuals = ResidualKind::ALL
        .iter()
        .filter_map(|k| r.analysis.residuals.summary(*k).map(|s| (k.key(), finite(s))))
        .collect();
    let hyp_ok = r.hypotheses.iter().all(|h| h.passed);
    let mut error = None;
    let mut reconstruction = None;
    let mut roundtrip = None;
    if with_reconstruction {
        match &r.result {
            Ok(res) => {
                reconstruction = Some(ReconstructionSummary {
                    branch_counts: res.branch_counts(),
                    dominant_branch: res.dominant_branch(),
                    infinitely_many: res.infinitely_many,
                    constancy_deviation: res.constancy_deviation,
                    stability: finite(Summary::of(&res.stability)),
                    line_immersion: res.immersion.iter().map(|f| finite(Summary::of(f))).collect(),
                });
            }
            Err(e) => error = Some(e.to_string()),
        }
        if let (Some(rt), Ok(res)) = (&r.roundtrip, &r.result) {
            if !res.infinitely_many {
                let (d, p) = (finite(Summary::of(&rt.dual_error)), finite(Summary::of(&rt.polar_error)));
                let mut dual_matches = BTreeMap::new();
                if d.count > 0 {
                    dual_matches.insert("willmore_dual", d.max < cfg.hypothesis_tol);
                }
                if p.count > 0 {
                    dual_matches.insert("polar_surface", p.max < cfg.hypothesis_tol);
                }
                roundtrip = Some(RoundtripSummary {
                    error: finite(rt.summary()),
                    dual_error: d,
                    polar_error: p,
                    dual_matches,
                    relabeled: rt.relabeled,
                });
            }
        }
    } else if !hyp_ok {
        error = r.hypotheses.iter().find(|h| !h.passed).map(|h| {
            format!("hypothesis `{}` violated at ({}, {}): {:.3e} >= {:.3e}", h.name, h.at.0, h.at.1, h.worst, h.threshold)
        });
    }
    let checks_passed = hyp_ok && (!with_reconstruction || r.result.is_ok());
    ReportDocument {
        schema_version: SCHEMA_VERSION,
        command,
        metadata: Metadata {
            family: args.surface.to_string(),
            params: args.surface.params(),
            n: r.chart.n(),
            grid: [r.chart.grid().nu, r.chart.grid().nv],
            fd_order: cfg.fd_order,
            tolerances: Tolerances {
                linear_algebra: cfg.tol,
                rank: cfg.rank_tol,
                guard_band_factor: GUARD_BAND,
                hypothesis: cfg.hypothesis_tol,
            },
            library_version: env!("CARGO_PKG_VERSION"),
        },
        residuals,
        hypotheses: r.hypotheses.clone(),
        classification: r.classification.clone(),
        error,
        reconstruction,
        roundtrip,
        convergence: None,
        checks_passed,
    }
}

pub fn cmd_analyze(args: &CommonArgs) -> Result<ReportDocument> {
    let r = run(args, args.grid.0, args.grid.1, false)?;
    Ok(document("analyze", args, &r, false))
}

pub fn cmd_roundtrip(args: &RoundtripArgs) -> Result<ReportDocument> {
    let c = &args.common;
    let r = run(c, c.grid.0, c.grid.1, true)?;
    let mut doc = document("roundtrip", c, &r, true);
    if !args.refine.is_empty() {
        doc.convergence = Some(convergence(c, &args.refine)?);
    }
    Ok(doc)
}

/// Residual and round-trip maxima over square grids, with fitted slopes.
pub fn convergence(args: &CommonArgs, sizes: &[usize]) -> Result<ConvergenceTable> {
    let mut rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut h = vec![];
    for &n in sizes {
        let r = run(args, n, n, true)?;
        h.push(r.chart.grid().h());
        for k in ResidualKind::ALL {
            if let Some(s) = r.analysis.residuals.summary(k) {
                rows.entry(k.key().to_string()).or_default().push(finite(s).max);
            }
        }
        if let Some(rt) = &r.roundtrip {
            rows.entry("roundtrip".into()).or_default().push(finite(rt.summary()).max);
            rows.entry("dual_error".into()).or_default().push(finite(Summary::of(&rt.dual_error)).max);
        }
    }
    let slopes = rows
        .iter()
        .filter(|(_, v)| v.len() == h.len())
        .map(|(k, v)| {
            // values at rounding level carry no rate
            let s = if v.iter().all(|&x| x > 1e-12) { fitted_slope(&h, v) } else { None };
            (k.clone(), s)
        })
        .collect();
    Ok(ConvergenceTable {
        grids: sizes.to_vec(),
        h,
        rows,
        slopes,
    })
}

/// Writes the meshes; returns the report and the files written.
pub fn cmd_export(args: &ExportArgs) -> Result<(ReportDocument, Vec<PathBuf>)> {
    let c = &args.common;
    let r = run(c, c.grid.0, c.grid.1, true)?;
    if r.chart.n() != 3 {
        return Err(Error::Unsupported(format!("OBJ export of a surface in S^{}", r.chart.n())));
    }
    fs::create_dir_all(&args.mesh)?;
    let grid = *r.chart.grid();
    let mut written = vec![];
    let input: Vec<Option<[f64; 4]>> = (0..grid.len())
        .map(|k| {
            let (i, j) = grid.ij(k);
            sphere_point(&r.chart.sigma(i, j))
        })
        .collect();
    written.push(write_obj(&args.mesh.join("surface.obj"), &input, &r.chart)?);
    match &r.result {
        Ok(res) if res.infinitely_many => {
            let p = args.mesh.join("constant_congruence.txt");
            fs::write(
                &p,
                "rank U = 0: the congruence is constant and every null line of it is a solution; no recovered surface written.\n",
            )?;
            written.push(p);
        }
        Ok(res) => {
            // label 0 is the line nearest σ, label 1 its dual
            let mut recovered = vec![None; grid.len()];
            let mut dual = vec![None; grid.len()];
            let mut any_dual = false;
            for k in 0..grid.len() {
                let lines = &res.lines[k];
                let (i, j) = grid.ij(k);
                let s = r.chart.sigma(i, j);
                match lines.len() {
                    1 => recovered[k] = sphere_point(&lines[0]),
                    2 => {
                        let d0 = crate::minkowski::line_distance(&lines[0], &s);
                        let d1 = crate::minkowski::line_distance(&lines[1], &s);
                        let (a, b) = if d0 <= d1 { (0, 1) } else { (1, 0) };
                        recovered[k] = sphere_point(&lines[a]);
                        dual[k] = sphere_point(&lines[b]);
                        any_dual = true;
                    }
                    _ => {}
                }
            }
            written.push(write_obj(&args.mesh.join("recovered.obj"), &recovered, &r.chart)?);
            if any_dual {
                written.push(write_obj(&args.mesh.join("dual.obj"), &dual, &r.chart)?);
            }
        }
        Err(_) => {}
    }
    Ok((document("export", c, &r, true), written))
}

/// The point `x = ℓ_spatial / ℓ_last` of S³, when the line is not at the
/// degenerate gauge.
fn sphere_point(l: &nalgebra::DVector<f64>) -> Option<[f64; 4]> {
    let t = l[l.len() - 1];
    if t.abs() <= 1e-12 * l.norm() {
        return None;
    }
    Some([l[0] / t, l[1] / t, l[2] / t, l[3] / t])
}

/// OBJ with `v x₁ x₂ x₃ x₄` vertices (the fourth number is OBJ's optional
/// `w` slot) and quad faces, wrapping on periodic axes. Missing points are
/// skipped together with the faces that touch them.
fn write_obj(path: &Path, points: &[Option<[f64; 4]>], chart: &LiftedChart) -> Result<PathBuf> {
    let grid = *chart.grid();
    let mut index = vec![0usize; points.len()];
    let mut out = String::new();
    out.push_str(&format!("# {} {}x{}\n", chart.name(), grid.nu, grid.nv));
    let mut next = 1;
    for (k, p) in points.iter().enumerate() {
        if let Some(p) = p {
            out.push_str(&format!("v {:.12} {:.12} {:.12} {:.12}\n", p[0], p[1], p[2], p[3]));
            index[k] = next;
            next += 1;
        }
    }
    let [pu, pv] = grid.domain.periodic;
    let iu = if pu { grid.nu } else { grid.nu - 1 };
    let iv = if pv { grid.nv } else { grid.nv - 1 };
    for i in 0..iu {
        for j in 0..iv {
            let corners = [
                (i, j),
                ((i + 1) % grid.nu, j),
                ((i + 1) % grid.nu, (j + 1) % grid.nv),
                (i, (j + 1) % grid.nv),
            ];
            let ids: Vec<usize> = corners.iter().map(|&(a, b)| index[grid.index(a, b)]).collect();
            if ids.iter().all(|&x| x > 0) {
                out.push_str(&format!("f {} {} {} {}\n", ids[0], ids[1], ids[2], ids[3]));
            }
        }
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(path.to_path_buf())
}

fn emit(doc: &ReportDocument, out: Option<&Path>) -> Result<()> {
    let json = doc.to_json()?;
    match out {
        Some(p) => fs::write(p, json)?,
        None => print!("{json}"),
    }
    Ok(())
}

/// Runs a parsed command line; returns the process exit code.
pub fn run_cli(cli: Cli) -> i32 {
    let outcome = match &cli.command {
        Command::Analyze(a) => cmd_analyze(a).and_then(|d| emit(&d, a.out.as_deref()).map(|_| d.checks_passed)),
        Command::Roundtrip(a) => cmd_roundtrip(a).and_then(|d| emit(&d, a.common.out.as_deref()).map(|_| d.checks_passed)),
        Command::Export(a) => cmd_export(a).and_then(|(d, files)| {
            for f in &files {
                eprintln!("wrote {}", f.display());
            }
            emit(&d, a.common.out.as_deref()).map(|_| d.checks_passed)
        }),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e @ (Error::InvalidParams { .. } | Error::UnknownFamily(_) | Error::AmbientTooSmall(_) | Error::Unsupported(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(surface: &str, n: usize) -> CommonArgs {
        CommonArgs {
            surface: surface.parse().unwrap(),
            n: None,
            grid: (n, n),
            fd_order: FdOrder::Second,
            tol_rank: AnalysisConfig::default().rank_tol,
            tol_hyp: AnalysisConfig::default().hypothesis_tol,
            out: None,
        }
    }

    #[test]
    fn grid_flag_parses() {
        assert_eq!(parse_grid("64x32"), Ok((64, 32)));
        assert!(parse_grid("64").is_err());
        assert!(parse_grid("ax3").is_err());
    }

    #[test]
    fn clap_rejects_bad_flags() {
        assert!(Cli::try_parse_from(["cgauss", "analyze", "--surface", "klein_bottle"]).is_err());
        assert!(Cli::try_parse_from(["cgauss", "analyze", "--surface", "clifford", "--fd-order", "3"]).is_err());
        assert!(Cli::try_parse_from(["cgauss", "roundtrip", "--surface", "clifford", "--refine", "32,64"]).is_ok());
    }

    #[test]
    fn round_sphere_analysis() {
        let doc = cmd_analyze(&common("round_sphere", 32)).unwrap();
        assert_eq!(doc.classification.histogram, BTreeMap::from([("rank_0".to_string(), 1024)]));
        assert!(doc.residuals.values().all(|s| s.max == 0.0));
        assert!(doc.checks_passed);
    }

    #[test]
    fn clifford_histogram_counts_every_point() {
        let doc = cmd_analyze(&common("clifford", 32)).unwrap();
        assert_eq!(doc.classification.histogram, BTreeMap::from([("rank_1".to_string(), 1024)]));
        let json = doc.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["metadata"]["fd_order"], "2");
    }

    #[test]
    fn padded_ambient_changes_n() {
        let mut a = common("clifford", 16);
        a.n = Some(4);
        let doc = cmd_analyze(&a).unwrap();
        assert_eq!(doc.metadata.n, 4);
        assert_eq!(doc.classification.histogram.get("rank_1"), Some(&256));
    }

    #[test]
    fn round_sphere_roundtrip_reports_branch_only() {
        let doc = cmd_roundtrip(&RoundtripArgs {
            common: common("round_sphere", 16),
            refine: vec![],
        })
        .unwrap();
        let rec = doc.reconstruction.unwrap();
        assert_eq!(rec.dominant_branch, Some(Branch::Rank0Constant));
        assert!(rec.infinitely_many);
        assert!(doc.roundtrip.is_none());
    }

    #[test]
    fn export_writes_meshes_on_the_sphere() {
        let dir = tempfile::tempdir().unwrap();
        let (doc, files) = cmd_export(&ExportArgs {
            common: common("clifford", 32),
            mesh: dir.path().to_path_buf(),
        })
        .unwrap();
        let names: Vec<String> = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into()).collect();
        assert_eq!(names, ["surface.obj", "recovered.obj", "dual.obj"], "{:?}", doc.error);
        for f in &files {
            let text = fs::read_to_string(f).unwrap();
            let verts: Vec<Vec<f64>> = text
                .lines()
                .filter(|l| l.starts_with("v "))
                .map(|l| l[2..].split_whitespace().map(|x| x.parse().unwrap()).collect())
                .collect();
            assert_eq!(verts.len(), 1024);
            for v in verts {
                let r: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((r - 1.0).abs() < 1e-9);
            }
            // torus: every quad wraps
            assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 1024);
        }
    }

    #[test]
    fn export_of_round_sphere_leaves_marker() {
        let dir = tempfile::tempdir().unwrap();
        let (_, files) = cmd_export(&ExportArgs {
            common: common("round_sphere", 12),
            mesh: dir.path().to_path_buf(),
        })
        .unwrap();
        let names: Vec<String> = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into()).collect();
        assert_eq!(names, ["surface.obj", "constant_congruence.txt"]);
    }

    #[test]
    fn export_rejects_higher_codimension() {
        let dir = tempfile::tempdir().unwrap();
        let r = cmd_export(&ExportArgs {
            common: common("flat_torus", 12),
            mesh: dir.path().to_path_buf(),
        });
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }
}
