use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::denoise::{denoise_stack, diagnostics_csv};
use crate::error::{Error, Result};
use crate::imaging::bundle::{load_mask, load_stack, save_fields, save_mask, save_stack, write_atomic};
use crate::imaging::{
    center_crop, normalize_stack, select_fixed_frame, write_pgm16, DisplacementField, FrameStack, GrayImage, Mask,
};
use crate::phantom::{simulate, PhantomConfig};
use crate::pipeline::{emit_report, CaseConfig, CaseReport, MetricRow, PipelineConfig, RegistrationMode, Report, Stage, StageTiming};
use crate::registration::{
    histogram_match, jacobian_determinant, joint_histogram_parzen, nmi, register_rigid, register_stack, shift_frame,
    LossRecord,
};
use crate::tensor::{
    count_negative_eigenvalues, fit_tensor, ha_gradient_stats, ha_line_profiles, helix_angle_map, save_tensor_map,
    stack_profile, tensor_invariants, wall_coordinates, HAProfile, TensorMap,
};

/// CSV with header `iteration,nmi_term,reg_term,total`.
pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("iteration,nmi_term,reg_term,total\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{},{}", r.iteration, r.nmi_term, r.reg_term, r.total);
    }
    out
}

/// CSV with one line per helix-angle profile.
pub fn profiles_csv(profiles: &[HAProfile]) -> String {
    let mut out = String::from("angle_deg,n_samples,slope,r_squared,rmse,included\n");
    for p in profiles {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.angle.to_degrees(),
            p.samples.len(),
            p.slope,
            p.r_squared,
            p.rmse,
            p.included
        );
    }
    out
}

/// Mean diffusivity and fractional anisotropy images; NaN off the mask or where the fit failed.
pub fn invariant_maps(map: &TensorMap, mask: &Mask) -> Result<(GrayImage, GrayImage)> {
    mask.check_matches(map.width, map.height)?;
    let (md, fa): (Vec<f64>, Vec<f64>) = map
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if map.valid[i] && mask.inside[i] {
                tensor_invariants(t)
            } else {
                (f64::NAN, f64::NAN)
            }
        })
        .unzip();
    Ok((GrayImage::new(map.width, map.height, md)?, GrayImage::new(map.width, map.height, fa)?))
}

/// Writes `tensors.json`, `md.pgm` and `fa.pgm` into `dir`.
pub fn write_fit_outputs(map: &TensorMap, mask: &Mask, dir: &Path) -> Result<()> {
    save_tensor_map(map, &dir.join("tensors.json"))?;
    let (md, fa) = invariant_maps(map, mask)?;
    write_pgm16(&dir.join("md.pgm"), &md, None)?;
    write_pgm16(&dir.join("fa.pgm"), &fa, Some((0.0, 1.0)))
}

/// Negative-eigenvalue counts and helix-angle statistics for one case;
/// writes `ha.pgm` and `profiles.csv` into `dir`. Also returns the number of
/// profiles before the inclusion rule.
pub fn metrics_with_outputs(case_id: &str, map: &TensorMap, mask: &Mask, n_spokes: usize, dir: &Path) -> Result<(MetricRow, usize)> {
    let neg = count_negative_eigenvalues(map, mask)?;
    let coords = wall_coordinates(mask)?;
    let ha = helix_angle_map(map, &coords, mask)?;
    let profiles = ha_line_profiles(&ha, &coords, n_spokes)?;
    let hag = ha_gradient_stats(&profiles);
    let ha_image = GrayImage::new(ha.width, ha.height, ha.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect())?;
    write_pgm16(&dir.join("ha.pgm"), &ha_image, Some((-90.0, 90.0)))?;
    write_atomic(&dir.join("profiles.csv"), profiles_csv(&profiles).as_bytes())?;
    Ok((MetricRow::new(case_id, neg, &hag), profiles.len()))
}

/// Integer-shift registration of every frame onto the brightest frame.
/// Returns the shifted stack and the shifts as constant fields.
pub fn register_rigid_stack(stack: &FrameStack, max_shift: usize, contrast_surrogate: bool) -> Result<(FrameStack, Vec<DisplacementField>)> {
    let fixed_index = select_fixed_frame(stack);
    let frames = stack.frames();
    let fixed = &frames[fixed_index];
    let shifted: Vec<Result<(crate::imaging::Frame, [i64; 2])>> = (0..frames.len())
        .into_par_iter()
        .map(|i| {
            if i == fixed_index {
                return Ok((frames[i].clone(), [0, 0]));
            }
            let wrap = |e: Error| Error::Frame {
                frame: i,
                source: Box::new(e),
            };
            let (dx, dy) = if contrast_surrogate {
                let matched = histogram_match(&frames[i], fixed).map_err(wrap)?.frame;
                register_rigid(fixed, &matched, max_shift).map_err(wrap)?
            } else {
                register_rigid(fixed, &frames[i], max_shift).map_err(wrap)?
            };
            Ok((shift_frame(&frames[i], dx, dy), [dx, dy]))
        })
        .collect();
    let mut out = Vec::with_capacity(frames.len());
    let mut fields = Vec::with_capacity(frames.len());
    for r in shifted {
        let (frame, [dx, dy]) = r?;
        out.push(frame);
        fields.push(DisplacementField::constant(stack.width(), stack.height(), [dx as f64, dy as f64]));
    }
    Ok((FrameStack::with_flag(out, stack.is_normalized())?, fields))
}

fn timed<T>(stage: Stage, case_id: &str, timings: &mut Vec<StageTiming>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| Error::Stage {
        stage,
        case_id: case_id.into(),
        source: Box::new(e),
    });
    timings.push(StageTiming {
        stage,
        seconds: start.elapsed().as_secs_f64(),
    });
    out
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_profiles(stack: &FrameStack, dir: &Path, tag: &str) -> Result<()> {
    let p = stack_profile(stack)?;
    write_pgm16(&dir.join(format!("profile_{tag}_horizontal.pgm")), &p.horizontal, Some((0.0, 1.0)))?;
    write_pgm16(&dir.join(format!("profile_{tag}_vertical.pgm")), &p.vertical, Some((0.0, 1.0)))
}

fn load_case(cfg: &PipelineConfig, case: &CaseConfig, dir: &Path) -> Result<(FrameStack, Mask)> {
    match (&case.phantom, &case.stack, &case.mask) {
        (Some(p), None, None) => {
            let pc = PhantomConfig {
                seed: cfg.seed ^ p.seed,
                ..p.clone()
            };
            let acq = simulate(&pc)?;
            save_stack(&acq.stack, &dir.join("input.json"))?;
            save_mask(&acq.truth.mask, &dir.join("input_mask.json"))?;
            if pc.motion_amplitude > 0.0 {
                save_fields(&acq.motion.inverse, &dir.join("true_fields.json"))?;
            }
            Ok((acq.stack, acq.truth.mask))
        }
        (None, Some(stack), Some(mask)) => {
            let stack = load_stack(stack)?;
            let mask = load_mask(mask)?;
            mask.check_matches(stack.width(), stack.height())?;
            Ok((stack, mask))
        }
        _ => Err(Error::Config(format!("case {} has no unique input", case.id))),
    }
}

/// Runs every enabled stage for one case, writing artifacts under
/// `cfg.out_dir/<case id>/` as each stage finishes.
pub fn run_case(cfg: &PipelineConfig, case: &CaseConfig) -> Result<CaseReport> {
    let id = case.id.as_str();
    let dir = cfg.out_dir.join(id);
    let mut timings = Vec::new();

    let (stack, mask) = timed(Stage::Load, id, &mut timings, || {
        mkdir(&dir)?;
        load_case(cfg, case, &dir)
    })?;

    let (stack, mask) = timed(Stage::Crop, id, &mut timings, || {
        let cropped = center_crop(&stack, cfg.crop_size)?;
        let mask = mask.center_crop(cfg.crop_size)?;
        save_mask(&mask, &dir.join("mask.json"))?;
        Ok((cropped, mask))
    })?;

    let stack = timed(Stage::Normalize, id, &mut timings, || {
        let s = normalize_stack(&stack)?;
        save_stack(&s, &dir.join("normalized.json"))?;
        Ok(s)
    })?;

    let mut denoise_kept = None;
    let stack = if cfg.denoise_enabled {
        timed(Stage::Denoise, id, &mut timings, || {
            let (denoised, dec, keep) = denoise_stack(&stack, &cfg.denoise)?;
            write_atomic(&dir.join("denoise_components.csv"), diagnostics_csv(&dec, &keep).as_bytes())?;
            denoise_kept = Some(keep.iter().filter(|k| **k).count());
            // reconstruction can move the maximum; registration needs unit range
            let s = normalize_stack(&denoised)?;
            save_stack(&s, &dir.join("denoised.json"))?;
            Ok(s)
        })?
    } else {
        stack
    };

    let fixed_index = select_fixed_frame(&stack);
    let mut min_jacobian = None;
    let (registered, frame_nmi) = timed(Stage::Register, id, &mut timings, || {
        write_profiles(&stack, &dir, "before")?;
        let registered = match cfg.mode {
            RegistrationMode::None => stack.clone(),
            RegistrationMode::Rigid => {
                let (s, fields) = register_rigid_stack(&stack, cfg.rigid.max_shift, cfg.registration.contrast_surrogate)?;
                save_fields(&fields, &dir.join("fields.json"))?;
                min_jacobian = Some(1.0);
                s
            }
            RegistrationMode::Deformable => {
                let reg = register_stack(&stack, &cfg.registration)?;
                save_fields(&reg.fields, &dir.join("fields.json"))?;
                let traces = dir.join("traces");
                mkdir(&traces)?;
                for (i, trace) in reg.traces.iter().enumerate() {
                    if i != reg.fixed_index {
                        write_atomic(&traces.join(format!("frame_{i:03}.csv")), loss_trace_csv(trace).as_bytes())?;
                    }
                }
                let mut jmin = f64::INFINITY;
                for f in &reg.fields {
                    jmin = jacobian_determinant(f)?.into_iter().fold(jmin, f64::min);
                }
                min_jacobian = Some(jmin);
                reg.registered
            }
        };
        if cfg.mode != RegistrationMode::None {
            save_stack(&registered, &dir.join("registered.json"))?;
        }
        write_profiles(&registered, &dir, "after")?;
        let fixed = &registered.frames()[fixed_index];
        let frame_nmi = registered
            .frames()
            .iter()
            .map(|f| Ok(nmi(&joint_histogram_parzen(fixed, f, &cfg.registration)?)))
            .collect::<Result<Vec<f64>>>()?;
        Ok((registered, frame_nmi))
    })?;
    let flagged_frames = (0..frame_nmi.len())
        .filter(|i| *i != fixed_index && frame_nmi[*i] < cfg.metrics.frame_flag_nmi)
        .collect();

    let map = timed(Stage::Fit, id, &mut timings, || {
        let map = fit_tensor(&registered, &mask)?;
        write_fit_outputs(&map, &mask, &dir)?;
        Ok(map)
    })?;

    let (row, n_profiles_total) = timed(Stage::Metrics, id, &mut timings, || {
        metrics_with_outputs(id, &map, &mask, cfg.metrics.n_spokes, &dir)
    })?;

    Ok(CaseReport {
        case_id: id.into(),
        row,
        timings,
        n_frames: registered.len(),
        fixed_index,
        denoise_kept,
        frame_nmi,
        flagged_frames,
        min_jacobian,
        n_profiles_total,
    })
}

/// Runs all cases on a pool of `jobs` threads and writes the aggregate report.
///
/// Every case runs to completion or failure; if any failed, the error of the
/// first failing case in id order is returned and no report is written.
pub fn run_pipeline(cfg: &PipelineConfig, jobs: usize) -> Result<Report> {
    cfg.validate()?;
    if jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    let results: Vec<Result<CaseReport>> = pool.install(|| cfg.cases.par_iter().map(|c| run_case(cfg, c)).collect());
    let mut ordered: Vec<(&str, Result<CaseReport>)> = cfg.cases.iter().map(|c| c.id.as_str()).zip(results).collect();
    ordered.sort_by(|a, b| a.0.cmp(b.0));
    let mut cases = Vec::with_capacity(ordered.len());
    for (_, r) in ordered {
        cases.push(r?);
    }
    let report = Report::new(cfg.clone(), cases);
    emit_report(&report, &cfg.out_dir).map_err(|e| Error::Stage {
        stage: Stage::Report,
        case_id: "all".into(),
        source: Box::new(e),
    })?;
    Ok(report)
}
