//! On-disk artifacts: run directories and uncertainty-map exports.
//!
//! A run directory holds `config.txt` (fully resolved), `log.jsonl` (one
//! record per step), `student.bin` / `teacher.bin` weight files with their
//! JSON indexes, and `report.json`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::format;
use crate::rng::{stream_id, StreamKey};
use crate::segnet::{Model, NoiseSpec};
use crate::trainer::{self, Experiment, RunReport};
use crate::uncertainty;

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "log.jsonl";
pub const STUDENT_FILE: &str = "student.bin";
pub const TEACHER_FILE: &str = "teacher.bin";
pub const REPORT_FILE: &str = "report.json";

const TAG_MAPS: u64 = 0x4d41_5053;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains per `cfg`, writing every artifact under `cfg.out_dir`.
///
/// On numeric divergence the log keeps every completed step plus an error
/// record naming the offending step, and the error is returned.
pub fn run_training(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let data_dir = cfg.data_dir.as_deref().ok_or_else(|| Error::Config("data_dir is not set".into()))?;
    let out = cfg.out_dir.as_deref().ok_or_else(|| Error::Config("out_dir is not set".into()))?;
    let dataset = Dataset::load(data_dir)?;
    create_dir(out)?;
    format::write_file(&out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;

    let log_path = out.join(LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut io_err: Option<std::io::Error> = None;
    let exp = Experiment { model: cfg.model.clone(), loss: cfg.loss.clone(), train: cfg.train.clone() };
    let result = trainer::train(&exp, &dataset, |line| {
        if io_err.is_none() {
            let json = serde_json::to_string(line).expect("log line serializes");
            if let Err(e) = writeln!(log, "{json}") {
                io_err = Some(e);
            }
        }
    });
    if let Err(Error::NumericDivergence { step }) = &result {
        let _ = writeln!(log, "{{\"step\":{step},\"error\":\"non-finite loss\"}}");
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e));
    }
    let run = result?;
    run.state.student.save(&out.join(STUDENT_FILE))?;
    run.state.teacher.save(&out.join(TEACHER_FILE))?;
    let json = serde_json::to_string_pretty(&run.report)? + "\n";
    format::write_file(&out.join(REPORT_FILE), json.as_bytes())?;
    Ok(run.report)
}

/// Resolves `--weights`: a weights file, or a run directory from which the
/// student (or teacher) file is taken.
pub fn resolve_weights(path: &Path, teacher: bool) -> Result<PathBuf> {
    if path.is_dir() {
        return Ok(path.join(if teacher { TEACHER_FILE } else { STUDENT_FILE }));
    }
    if teacher {
        return Err(Error::Config("--teacher needs a run directory, not a weights file".into()));
    }
    Ok(path.to_path_buf())
}

/// Uncertainty summary of one exported sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapExport {
    pub id: String,
    pub u_c: Vec<f32>,
    pub u_f: f32,
    pub u_s: f32,
}

fn write_pgm_map(path: &Path, h: usize, w: usize, values: &[f32]) -> Result<()> {
    format::write_file(path, &format::encode_pgm(w, h, &format::quantize_unit(values)))
}

/// For every test sample writes `<id>_uv.pgm` (voxel uncertainty),
/// `<id>_c<k>.pgm` per feature channel and `<id>_uncertainty.txt` with the
/// `U_c` values, `U_f` and `U_s`.
pub fn export_uncertainty_maps(
    model: &Model,
    dataset: &Dataset,
    out: &Path,
    passes: usize,
    seed: u64,
    noise: NoiseSpec,
) -> Result<Vec<MapExport>> {
    create_dir(out)?;
    let mut summaries = Vec::new();
    for (index, sample) in dataset.test().enumerate() {
        let key = StreamKey::new(seed, stream_id(&[TAG_MAPS, index as u64]));
        let samples = model.mc_sample(&sample.image, passes, key, noise)?;
        let b = uncertainty::estimate(&samples, true)?;
        let (h, w) = (b.u_v_map.shape()[0], b.u_v_map.shape()[1]);
        write_pgm_map(&out.join(format!("{}_uv.pgm", sample.id)), h, w, b.u_v_map.data())?;
        let cs = b.u_c_maps.shape();
        let (fh, fw) = (cs[1], cs[2]);
        for c in 0..cs[0] {
            let plane = &b.u_c_maps.data()[c * fh * fw..(c + 1) * fh * fw];
            write_pgm_map(&out.join(format!("{}_c{c:02}.pgm", sample.id)), fh, fw, plane)?;
        }
        let mut text = String::from("U_c =");
        for u in &b.u_c {
            write!(text, " {u}").expect("write to String");
        }
        writeln!(text, "\nU_f = {}\nU_s = {}", b.u_f, b.u_s).expect("write to String");
        format::write_file(&out.join(format!("{}_uncertainty.txt", sample.id)), text.as_bytes())?;
        summaries.push(MapExport { id: sample.id.clone(), u_c: b.u_c, u_f: b.u_f, u_s: b.u_s });
    }
    Ok(summaries)
}
