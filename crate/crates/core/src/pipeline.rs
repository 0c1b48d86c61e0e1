//! Pipeline orchestration: configuration, stage execution, artifact
//! persistence between stages, and plot-data emission. Every artifact
//! carries a schema version and stages reject mismatches.

use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::coordinate_map::{
    build_map, constant_u_curves, evaluate_map, CoordinateMap, MapOptions, MappedSeries,
};
use crate::error::{Error, Result};
use crate::local_frames::{align_frames, frames_from_grid, FrameField};
use crate::numeric::spearman;
use crate::phase_binning::{build_grid, estimate_velocity, BinGrid};
use crate::separability::{independence_stats, IndependenceReport};
use crate::signal_io::{
    generate_sources, load_csv, mix_sources, pca_normalize, store_csv, store_wav16, MixingParams,
    PcaRecord, TimeSeries,
};
use crate::weights::{
    compute_weights, enumerate_partitions, weight_correlation, Partition, WeightSeries,
};

pub const SCHEMA_SERIES: &str = "nlbss.series/1";
pub const SCHEMA_PCA: &str = "nlbss.pca/1";
pub const SCHEMA_GRID: &str = "nlbss.grid/1";
pub const SCHEMA_FRAMES: &str = "nlbss.frames/1";
pub const SCHEMA_WEIGHTS: &str = "nlbss.weights/1";
pub const SCHEMA_PARTITIONS: &str = "nlbss.partitions/1";
pub const SCHEMA_MAP: &str = "nlbss.map/1";
pub const SCHEMA_REPORT: &str = "nlbss.report/1";
pub const SCHEMA_SUMMARY: &str = "nlbss.summary/1";

/// Source stage configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    pub kind: String,
    pub channels: usize,
    pub samples: usize,
    pub rate: f64,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            kind: "ar2-noise".into(),
            channels: 2,
            samples: 500_000,
            rate: 16_000.0,
            seed: 7,
        }
    }
}

/// Grid stage configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub bins_per_dim: Vec<usize>,
    pub min_count: usize,
    pub margin: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            bins_per_dim: vec![16, 16],
            min_count: 50,
            margin: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameConfig {
    pub degeneracy_tol: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            degeneracy_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub threshold: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { threshold: 0.05 }
    }
}

/// Map stage configuration; lengths are fractions of the domain scale so
/// the config is independent of the data's units.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    /// Integration step as a fraction of the domain diagonal.
    pub step_frac: f64,
    /// Crossing tolerance as a fraction of the smallest bin width.
    pub cross_tol_frac: f64,
    /// Trace length bound as a fraction of the domain diagonal.
    pub max_param_frac: f64,
    /// Convergence tolerance for step-halving checks, in units of the step.
    pub integration_tol_steps: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            step_frac: 0.01,
            cross_tol_frac: 0.25,
            max_param_frac: 2.5,
            integration_tol_steps: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparabilityConfig {
    pub threshold: f64,
}

impl Default for SeparabilityConfig {
    fn default() -> Self {
        Self { threshold: 0.05 }
    }
}

/// Full pipeline configuration; a flat TOML file with one section per
/// stage. Any omitted field takes its default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub source: SourceConfig,
    pub mixing: MixingParams,
    pub grid: GridConfig,
    pub frames: FrameConfig,
    pub partition: PartitionConfig,
    pub map: MapConfig,
    pub separability: SeparabilityConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read `{}`: {e}", path.display())))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid.margin", self.grid.margin >= 0.0),
            ("frames.degeneracy_tol", self.frames.degeneracy_tol > 0.0),
            ("partition.threshold", self.partition.threshold > 0.0),
            ("map.step_frac", self.map.step_frac > 0.0),
            ("map.cross_tol_frac", self.map.cross_tol_frac > 0.0),
            ("map.max_param_frac", self.map.max_param_frac > 0.0),
            ("map.integration_tol_steps", self.map.integration_tol_steps > 0.0),
            ("separability.threshold", self.separability.threshold > 0.0),
            ("source.rate", self.source.rate > 0.0),
        ];
        for (name, ok) in positive {
            if !ok {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.source.samples < 3 {
            return Err(Error::Config("source.samples must be at least 3".into()));
        }
        if self.grid.bins_per_dim.iter().any(|&b| b < 2) {
            return Err(Error::Config("grid.bins_per_dim entries must be >= 2".into()));
        }
        self.mixing.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Map options for a concrete field, derived from the fractions.
    pub fn map_options(&self, field: &FrameField) -> MapOptions {
        let geom = field.geometry();
        let diag: f64 = (0..geom.dims)
            .map(|d| (geom.upper[d] - geom.lower[d]).powi(2))
            .sum::<f64>()
            .sqrt();
        let min_width = geom.widths.iter().cloned().fold(f64::INFINITY, f64::min);
        MapOptions {
            step: self.map.step_frac * diag,
            cross_tol: self.map.cross_tol_frac * min_width,
            max_param: self.map.max_param_frac * diag,
        }
    }
}

/// Versioned JSON envelope for structured artifacts.
#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema: String,
    payload: T,
}

pub fn write_artifact<T: Serialize>(path: &Path, schema: &str, payload: &T) -> Result<()> {
    let envelope = Envelope {
        schema: schema.to_string(),
        payload,
    };
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer(&mut file, &envelope)?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn read_artifact<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let file = std::fs::File::open(path)?;
    // Peek the schema first for a precise mismatch error.
    #[derive(Deserialize)]
    struct SchemaOnly {
        schema: String,
    }
    let text = std::io::read_to_string(file)?;
    let head: SchemaOnly = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if head.schema != schema {
        return Err(Error::SchemaMismatch {
            path: path.display().to_string(),
            found: head.schema,
            expected: schema.to_string(),
        });
    }
    let envelope: Envelope<T> = serde_json::from_str(&text)?;
    Ok(envelope.payload)
}

/// Sidecar metadata for CSV series artifacts (CSV itself carries no rate).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub stage: String,
    pub rate: f64,
    pub channels: usize,
    pub samples: usize,
}

fn write_series_artifact(dir: &Path, name: &str, stage: &str, series: &TimeSeries) -> Result<()> {
    store_csv(series, &dir.join(format!("{name}.csv")))?;
    write_artifact(
        &dir.join(format!("{name}.meta.json")),
        SCHEMA_SERIES,
        &SeriesMeta {
            stage: stage.to_string(),
            rate: series.sample_rate(),
            channels: series.n_channels(),
            samples: series.len(),
        },
    )
}

fn read_series_artifact(dir: &Path, name: &str) -> Result<TimeSeries> {
    let meta: SeriesMeta = read_artifact(&dir.join(format!("{name}.meta.json")), SCHEMA_SERIES)?;
    let csv_path = dir.join(format!("{name}.csv"));
    if !csv_path.exists() {
        return Err(Error::MissingArtifact(csv_path.display().to_string()));
    }
    load_csv(&csv_path, meta.rate)
}

/// Generates the sources and writes `sources.csv`.
pub fn stage_gen(config: &PipelineConfig, dir: &Path) -> Result<TimeSeries> {
    let s = generate_sources(
        &config.source.kind,
        config.source.channels,
        config.source.samples,
        config.source.rate,
        config.source.seed,
    )?;
    write_series_artifact(dir, "sources", "gen", &s)?;
    Ok(s)
}

/// Applies the nonlinear mixing map and PCA normalization, writing
/// `mixed.csv`, `measurements.csv` and `pca.json`.
pub fn stage_mix(config: &PipelineConfig, dir: &Path) -> Result<(TimeSeries, PcaRecord)> {
    let sources = read_series_artifact(dir, "sources")?;
    let mixed = mix_sources(&sources, &config.mixing)?;
    write_series_artifact(dir, "mixed", "mix", &mixed)?;
    let (measurements, pca) = pca_normalize(&mixed)?;
    write_series_artifact(dir, "measurements", "mix", &measurements)?;
    write_artifact(&dir.join("pca.json"), SCHEMA_PCA, &pca)?;
    Ok((measurements, pca))
}

/// Bins phase samples and accumulates per-bin moments into `grid.json`.
pub fn stage_bin(config: &PipelineConfig, dir: &Path) -> Result<BinGrid> {
    let measurements = read_series_artifact(dir, "measurements")?;
    let samples = estimate_velocity(&measurements)?;
    let grid = build_grid(
        &samples,
        &config.grid.bins_per_dim,
        config.grid.min_count,
        config.grid.margin,
    )?;
    write_artifact(&dir.join("grid.json"), SCHEMA_GRID, &grid)?;
    Ok(grid)
}

/// Builds and aligns local frames into `frames.json`; optionally writes a
/// quiver CSV (bin center and both local vectors per usable bin).
pub fn stage_frames(
    config: &PipelineConfig,
    dir: &Path,
    quiver_out: Option<&Path>,
) -> Result<FrameField> {
    let grid: BinGrid = read_artifact(&dir.join("grid.json"), SCHEMA_GRID)?;
    let raw = frames_from_grid(&grid, config.frames.degeneracy_tol);
    let field = align_frames(&grid, raw)?;
    write_artifact(&dir.join("frames.json"), SCHEMA_FRAMES, &field)?;
    if let Some(path) = quiver_out {
        write_quiver_csv(&field, path)?;
    }
    Ok(field)
}

fn write_quiver_csv(field: &FrameField, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x1", "x2", "v1_x1", "v1_x2", "v2_x1", "v2_x2"])?;
    for b in field.usable_bins() {
        let c = field.geometry().center(b);
        let frame = field.frame(b).unwrap();
        let row = [
            c[0],
            c[1],
            frame.v[(0, 0)],
            frame.v[(1, 0)],
            frame.v[(0, 1)],
            frame.v[(1, 1)],
        ];
        w.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Partition search output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionArtifact {
    pub correlation: Vec<Vec<f64>>,
    pub threshold: f64,
    pub partitions: Vec<Partition>,
    pub dropped_samples: usize,
}

/// Computes the weight series, correlations, and acceptable partitions,
/// writing `weights.csv` and `partitions.json`.
pub fn stage_weights(config: &PipelineConfig, dir: &Path) -> Result<(WeightSeries, PartitionArtifact)> {
    let measurements = read_series_artifact(dir, "measurements")?;
    let field: FrameField = read_artifact(&dir.join("frames.json"), SCHEMA_FRAMES)?;
    let samples = estimate_velocity(&measurements)?;
    let w = compute_weights(&samples, &field)?;
    write_weights_csv(&w, &dir.join("weights.csv"))?;
    write_artifact(
        &dir.join("weights.meta.json"),
        SCHEMA_WEIGHTS,
        &SeriesMeta {
            stage: "weights".into(),
            rate: measurements.sample_rate(),
            channels: w.dims(),
            samples: w.len(),
        },
    )?;
    let corr = weight_correlation(&w)?;
    let partitions = enumerate_partitions(&corr, config.partition.threshold);
    let artifact = PartitionArtifact {
        correlation: (0..corr.nrows())
            .map(|i| (0..corr.ncols()).map(|j| corr[(i, j)]).collect())
            .collect(),
        threshold: config.partition.threshold,
        partitions,
        dropped_samples: w.dropped,
    };
    write_artifact(&dir.join("partitions.json"), SCHEMA_PARTITIONS, &artifact)?;
    Ok((w, artifact))
}

fn write_weights_csv(w: &WeightSeries, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=w.dims()).map(|k| format!("w{k}")));
    writer.write_record(&header)?;
    for i in 0..w.len() {
        let mut row = vec![format!("{}", w.t_index(i))];
        row.extend(w.get(i).iter().map(|v| format!("{v}")));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Builds the coordinate map from the best-scoring partition, writing
/// `map.json`, the node grid CSV, and constant-u curve CSVs.
pub fn stage_map(config: &PipelineConfig, dir: &Path) -> Result<CoordinateMap> {
    let field: FrameField = read_artifact(&dir.join("frames.json"), SCHEMA_FRAMES)?;
    let partitions: PartitionArtifact =
        read_artifact(&dir.join("partitions.json"), SCHEMA_PARTITIONS)?;
    let Some(best) = partitions.partitions.first() else {
        return Err(Error::InvalidInput(
            "no partition passed the correlation threshold; weights are inseparable".into(),
        ));
    };
    let x0_bin = field
        .densest_usable_bin()
        .ok_or_else(|| Error::NoValidBins("no usable bins for the base point".into()))?;
    let x0 = field.geometry().center(x0_bin);
    let opts = config.map_options(&field);
    let map = build_map(&field, best, &x0, &opts)?;
    write_artifact(&dir.join("map.json"), SCHEMA_MAP, &map)?;
    write_map_grid_csv(&map, &dir.join("map_grid.csv"))?;
    write_iso_curves_csv(&field, &map, &dir.join("constant_u.csv"))?;
    Ok(map)
}

fn write_map_grid_csv(map: &CoordinateMap, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x1", "x2", "u1", "u2", "defined"])?;
    let geom = map.geometry();
    for flat in 0..geom.n_bins() {
        let c = geom.center(flat);
        match map.node_u(flat) {
            Some([u1, u2]) => {
                w.write_record([
                    format!("{}", c[0]),
                    format!("{}", c[1]),
                    format!("{u1}"),
                    format!("{u2}"),
                    "1".into(),
                ])?;
            }
            None => {
                w.write_record([
                    format!("{}", c[0]),
                    format!("{}", c[1]),
                    String::new(),
                    String::new(),
                    "0".into(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn write_iso_curves_csv(field: &FrameField, map: &CoordinateMap, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["family", "level", "vertex", "x1", "x2"])?;
    for family in [1usize, 2] {
        let mut values: Vec<f64> = (0..map.geometry().n_bins())
            .filter_map(|b| map.node_u(b).map(|u| u[family - 1]))
            .collect();
        if values.is_empty() {
            continue;
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let levels: Vec<f64> = (1..=9).map(|i| quantile(&values, i as f64 / 10.0)).collect();
        for (level, line) in constant_u_curves(field, map, family, &levels)? {
            for i in 0..line.len() {
                let p = line.point(i);
                w.write_record([
                    format!("{family}"),
                    format!("{level}"),
                    format!("{i}"),
                    format!("{}", p[0]),
                    format!("{}", p[1]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-component recovery quality against the true sources (available in
/// synthetic runs): Spearman correlations after the best component pairing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    /// Component pairing: recovered component i matches source `pairing[i]`.
    pub pairing: Vec<usize>,
    /// |Spearman| of each recovered component against its paired source.
    pub matched_spearman: Vec<f64>,
    /// |Spearman| of each recovered component against the other source.
    pub cross_spearman: Vec<f64>,
}

/// Computes recovery metrics for a mapped series against true sources.
pub fn recovery_metrics(u: &MappedSeries, sources: &TimeSeries) -> Result<RecoveryMetrics> {
    if sources.n_channels() != 2 {
        return Err(Error::ShapeMismatch("recovery expects 2 source channels".into()));
    }
    // The measurement series drops the two endpoint samples during velocity
    // estimation, so mapped t-indices refer to measurement rows; measurement
    // row t corresponds to source sample t (same series length).
    let mut s1 = Vec::with_capacity(u.len());
    let mut s2 = Vec::with_capacity(u.len());
    for i in 0..u.len() {
        let t = u.t_index(i);
        let row = sources.sample(t);
        s1.push(row[0]);
        s2.push(row[1]);
    }
    let u1 = u.channel(0);
    let u2 = u.channel(1);
    let rho = [
        [spearman(&u1, &s1).abs(), spearman(&u1, &s2).abs()],
        [spearman(&u2, &s1).abs(), spearman(&u2, &s2).abs()],
    ];
    // Choose the pairing with the larger total match.
    let direct = rho[0][0] + rho[1][1];
    let swapped = rho[0][1] + rho[1][0];
    let pairing = if direct >= swapped { vec![0, 1] } else { vec![1, 0] };
    let matched = vec![rho[0][pairing[0]], rho[1][pairing[1]]];
    let cross = vec![rho[0][1 - pairing[0]], rho[1][1 - pairing[1]]];
    Ok(RecoveryMetrics {
        pairing,
        matched_spearman: matched,
        cross_spearman: cross,
    })
}

/// Verification report artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub report: IndependenceReport,
    pub dropped_samples: usize,
    pub recovery: Option<RecoveryMetrics>,
}

/// Evaluates the map on the measurements and checks factorizability,
/// writing `report.json`, a key-value `report.txt`, and `report_stats.csv`.
/// When the true sources artifact is present, recovery Spearman metrics
/// are included.
pub fn stage_verify(config: &PipelineConfig, dir: &Path) -> Result<ReportArtifact> {
    let measurements = read_series_artifact(dir, "measurements")?;
    let map: CoordinateMap = read_artifact(&dir.join("map.json"), SCHEMA_MAP)?;
    let u = evaluate_map(&map, &measurements)?;
    let report = independence_stats(&u, config.separability.threshold)?;
    let recovery = if dir.join("sources.meta.json").exists() {
        let sources = read_series_artifact(dir, "sources")?;
        Some(recovery_metrics(&u, &sources)?)
    } else {
        None
    };
    let artifact = ReportArtifact {
        report,
        dropped_samples: u.dropped,
        recovery,
    };
    write_artifact(&dir.join("report.json"), SCHEMA_REPORT, &artifact)?;
    write_report_txt(&artifact, &dir.join("report.txt"))?;
    write_report_csv(&artifact.report, &dir.join("report_stats.csv"))?;
    Ok(artifact)
}

fn write_report_txt(artifact: &ReportArtifact, path: &Path) -> Result<()> {
    let r = &artifact.report;
    let mut out = String::new();
    out.push_str(&format!("verdict = {}\n", if r.verdict { "separable" } else { "inseparable" }));
    out.push_str(&format!("max_stat = {}\n", r.max_stat));
    out.push_str(&format!("threshold = {}\n", r.threshold));
    out.push_str(&format!("fluctuation_scale = {}\n", r.fluctuation_scale));
    out.push_str(&format!("samples = {}\n", r.samples));
    out.push_str(&format!("spearman_u = {}\n", r.spearman_u));
    out.push_str(&format!("dropped_samples = {}\n", artifact.dropped_samples));
    if let Some(rec) = &artifact.recovery {
        out.push_str(&format!("recovery_pairing = {:?}\n", rec.pairing));
        out.push_str(&format!("recovery_matched_spearman = {:?}\n", rec.matched_spearman));
        out.push_str(&format!("recovery_cross_spearman = {:?}\n", rec.cross_spearman));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_report_csv(report: &IndependenceReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["table", "p", "q", "value"])?;
    for p in 0..3 {
        for q in 0..3 {
            w.write_record([
                "u".into(),
                format!("{}", p + 1),
                format!("{}", q + 1),
                format!("{}", report.moment_u[p][q]),
            ])?;
            w.write_record([
                "du".into(),
                format!("{}", p + 1),
                format!("{}", q + 1),
                format!("{}", report.moment_du[p][q]),
            ])?;
        }
    }
    w.write_record(["spearman".into(), "1".into(), "1".into(), format!("{}", report.spearman_u)])?;
    w.flush()?;
    Ok(())
}

/// Writes the recovered per-channel time courses as CSV and WAV, returning
/// the number of WAV samples clamped during quantization.
pub fn stage_recover(_config: &PipelineConfig, dir: &Path) -> Result<usize> {
    let measurements = read_series_artifact(dir, "measurements")?;
    let map: CoordinateMap = read_artifact(&dir.join("map.json"), SCHEMA_MAP)?;
    let u = evaluate_map(&map, &measurements)?;
    // CSV with original time indices.
    let mut w = csv::Writer::from_path(dir.join("recovered.csv"))?;
    w.write_record(["t", "u1", "u2"])?;
    for i in 0..u.len() {
        let val = u.get(i);
        w.write_record([
            format!("{}", u.t_index(i)),
            format!("{}", val[0]),
            format!("{}", val[1]),
        ])?;
    }
    w.flush()?;
    // WAV rendering: center each channel and scale its peak into the
    // 16-bit range. Dropped samples are skipped, so the audio is the kept
    // subsequence.
    let mut clamped_total = 0;
    for k in 0..2 {
        let ch = u.channel(k);
        let n = ch.len() as f64;
        let mean: f64 = ch.iter().sum::<f64>() / n;
        let peak = ch
            .iter()
            .map(|v| (v - mean).abs())
            .fold(0.0_f64, f64::max)
            .max(f64::MIN_POSITIVE);
        let scale = 30_000.0 / peak;
        let rendered: Vec<f64> = ch.iter().map(|v| (v - mean) * scale).collect();
        let series = TimeSeries::new(1, measurements.sample_rate(), rendered)?;
        clamped_total += store_wav16(&series, &dir.join(format!("recovered_ch{}.wav", k + 1)))?;
    }
    Ok(clamped_total)
}

/// One-line-per-metric run summary; byte-identical across reruns with the
/// same configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub samples: usize,
    pub verdict: String,
    pub decision_stage: String,
    pub weight_correlation: f64,
    pub partition_count: usize,
    pub best_partition_score: Option<f64>,
    pub defined_node_fraction: Option<f64>,
    pub max_stat: Option<f64>,
    pub threshold: f64,
    pub dropped_weight_samples: usize,
    pub dropped_map_samples: Option<usize>,
    pub recovery: Option<RecoveryMetrics>,
    pub wav_clamped_samples: Option<usize>,
}

fn write_summary(dir: &Path, summary: &PipelineSummary) -> Result<()> {
    write_artifact(&dir.join("summary.json"), SCHEMA_SUMMARY, summary)?;
    let mut out = String::new();
    out.push_str(&format!("verdict = {}\n", summary.verdict));
    out.push_str(&format!("decision_stage = {}\n", summary.decision_stage));
    out.push_str(&format!("seed = {}\n", summary.seed));
    out.push_str(&format!("samples = {}\n", summary.samples));
    out.push_str(&format!("weight_correlation = {}\n", summary.weight_correlation));
    out.push_str(&format!("partition_count = {}\n", summary.partition_count));
    if let Some(v) = summary.best_partition_score {
        out.push_str(&format!("best_partition_score = {v}\n"));
    }
    if let Some(v) = summary.defined_node_fraction {
        out.push_str(&format!("defined_node_fraction = {v}\n"));
    }
    if let Some(v) = summary.max_stat {
        out.push_str(&format!("max_stat = {v}\n"));
    }
    out.push_str(&format!("threshold = {}\n", summary.threshold));
    out.push_str(&format!(
        "dropped_weight_samples = {}\n",
        summary.dropped_weight_samples
    ));
    if let Some(v) = summary.dropped_map_samples {
        out.push_str(&format!("dropped_map_samples = {v}\n"));
    }
    if let Some(rec) = &summary.recovery {
        out.push_str(&format!("recovery_pairing = {:?}\n", rec.pairing));
        out.push_str(&format!("recovery_matched_spearman = {:?}\n", rec.matched_spearman));
        out.push_str(&format!("recovery_cross_spearman = {:?}\n", rec.cross_spearman));
    }
    if let Some(v) = summary.wav_clamped_samples {
        out.push_str(&format!("wav_clamped_samples = {v}\n"));
    }
    std::fs::write(dir.join("summary.txt"), out)?;
    Ok(())
}

/// Runs the full pipeline: gen, mix (with normalization), bin, frames,
/// weights and partition search, then — when a partition is accepted —
/// map construction, verification, and recovery. Writes every intermediate
/// artifact plus a summary. Idempotent for a fixed seed.
pub fn run_pipeline(config: &PipelineConfig, dir: &Path) -> Result<PipelineSummary> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let config_text = toml::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("config.toml"), config_text)?;

    stage_gen(config, dir).map_err(|e| e.in_stage("gen"))?;
    stage_mix(config, dir).map_err(|e| e.in_stage("mix"))?;
    stage_bin(config, dir).map_err(|e| e.in_stage("bin"))?;
    let field = stage_frames(config, dir, Some(&dir.join("quiver.csv")))
        .map_err(|e| e.in_stage("frames"))?;
    let (w, partitions) = stage_weights(config, dir).map_err(|e| e.in_stage("weights"))?;

    let weight_corr = partitions
        .correlation
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j > i))
        .map(|(_, v)| v.abs())
        .fold(0.0_f64, f64::max);

    let mut summary = PipelineSummary {
        seed: config.source.seed,
        samples: config.source.samples,
        verdict: "inseparable".into(),
        decision_stage: "partition".into(),
        weight_correlation: weight_corr,
        partition_count: partitions.partitions.len(),
        best_partition_score: partitions.partitions.first().map(|p| p.score),
        defined_node_fraction: None,
        max_stat: None,
        threshold: config.separability.threshold,
        dropped_weight_samples: w.dropped,
        dropped_map_samples: None,
        recovery: None,
        wav_clamped_samples: None,
    };
    if partitions.partitions.is_empty() {
        summary.max_stat = Some(weight_corr);
        write_summary(dir, &summary)?;
        return Ok(summary);
    }

    let map = stage_map(config, dir).map_err(|e| e.in_stage("map"))?;
    summary.defined_node_fraction = Some(map.defined_fraction(&field));
    let report = stage_verify(config, dir).map_err(|e| e.in_stage("verify"))?;
    summary.decision_stage = "verify".into();
    summary.max_stat = Some(report.report.max_stat);
    summary.dropped_map_samples = Some(report.dropped_samples);
    summary.recovery = report.recovery.clone();
    if report.report.verdict {
        summary.verdict = "separable".into();
        let clamped = stage_recover(config, dir).map_err(|e| e.in_stage("recover"))?;
        summary.wav_clamped_samples = Some(clamped);
    }
    write_summary(dir, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_round_trip_toml() {
        let config = PipelineConfig::default();
        let text = toml::to_string_pretty(&config).unwrap();
        let parsed: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.source.samples, 500_000);
        assert_eq!(parsed.grid.bins_per_dim, vec![16, 16]);
        assert_eq!(parsed.source.rate, 16_000.0);
        assert_eq!(parsed.mixing.b2, 3.75e7);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let parsed: PipelineConfig = toml::from_str(
            "[source]\nsamples = 1000\nseed = 3\n\n[grid]\nbins_per_dim = [8, 8]\n",
        )
        .unwrap();
        assert_eq!(parsed.source.samples, 1000);
        assert_eq!(parsed.source.seed, 3);
        assert_eq!(parsed.grid.bins_per_dim, vec![8, 8]);
        assert_eq!(parsed.grid.min_count, 50);
        assert_eq!(parsed.partition.threshold, 0.05);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut config = PipelineConfig::default();
        config.map.step_frac = 0.0;
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn artifact_schema_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("thing.json");
        write_artifact(&path, "nlbss.grid/1", &vec![1, 2, 3]).unwrap();
        let err = read_artifact::<Vec<i32>>(&path, "nlbss.grid/2").unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch { .. }));
        let ok: Vec<i32> = read_artifact(&path, "nlbss.grid/1").unwrap();
        assert_eq!(ok, vec![1, 2, 3]);
    }

    #[test]
    fn missing_artifact_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_artifact::<Vec<i32>>(&dir.path().join("absent.json"), "nlbss.grid/1")
            .unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }
}
