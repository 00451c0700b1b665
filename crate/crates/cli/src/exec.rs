use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use graffiti_core::attention::{attention_map, region_mass, IdentityEmbedding};
use graffiti_core::diffusion::{Conditioning, DenoiserModel};
use graffiti_core::facegen::{face_grid, render_face, write_gray_ppm, write_ppm};
use graffiti_core::identity::ffc;
use graffiti_core::lora::{adapted_model, read_adapters, write_adapters, AdapterSet};
use graffiti_core::pipeline::{
    ablate_attention, ablate_order, diffuse_latent, face_codec, face_latent, face_tokens, identity_embedding,
    pipeline_shape, prompt_conditioning, run_identity_first, run_style_first, train_adapters, train_toy_denoiser,
    AttentionSweep, Order, OrderSweep, TrainConfig, CSV_HEADER, TRAIN_PROMPT,
};
use graffiti_core::{RngStream, Tensor64};

use crate::args::{Action, Command};
use crate::output::{read_vector, write_atomic};
use crate::CliError;

// child streams of the root seed, one per command stage
const TRAIN_FACES: u64 = 10;
const TRAIN_DENOISER: u64 = 20;
const TRAIN_ADAPTERS: u64 = 21;
const TEST_FACES: u64 = 30;
const DIFFUSE: u64 = 40;

/// Runs `cmd`: the run header goes to stderr, the one-line summary to stdout.
/// Returns the process exit code.
pub fn execute(cmd: &Command) -> i32 {
    eprintln!("# {}", cmd.header());
    match execute_to(cmd) {
        Ok(summary) => {
            println!("{summary}");
            crate::EXIT_OK
        }
        Err(e) => {
            eprintln!("graffiti: {e}");
            e.exit_code()
        }
    }
}

/// Runs `cmd`, writing artifacts under its out-dir, and returns the summary line.
pub fn execute_to(cmd: &Command) -> Result<String, CliError> {
    let cfg = &cmd.config;
    let root = RngStream::new(cmd.seed);
    let out = |name: &str| cmd.out_dir.join(name);
    match &cmd.action {
        Action::Render { faces } => {
            let grid = face_grid(*faces, cmd.seed);
            let mut table = String::from("face_id,");
            table.push_str(&graffiti_core::identity::AttributeVector::FACE_NAMES.join(","));
            table.push_str(",palette,background\n");
            for (i, face) in grid.iter().enumerate() {
                let img = render_face(face, cfg.image_size)?;
                write_atomic(&out(&format!("face_{i:03}.ppm")), &ppm(&img)?)?;
                let vals: Vec<String> = face.attrs.values().iter().map(f64::to_string).collect();
                let _ = writeln!(table, "{i},{},{},{}", vals.join(","), face.palette, face.background);
            }
            write_atomic(&out("attributes.csv"), table.as_bytes())?;
            Ok(format!(
                "render: {} faces at {}px -> {}",
                faces,
                cfg.image_size,
                cmd.out_dir.display()
            ))
        }
        Action::Stylize { faces, order } => {
            let mut csv = format!("{CSV_HEADER}\n");
            let mut total = 0.0;
            for (i, face) in face_grid(*faces, cmd.seed).iter().enumerate() {
                let img = render_face(face, cfg.image_size)?;
                let run = match order {
                    Order::PS => run_style_first(&img, TRAIN_PROMPT, cfg)?,
                    Order::SP => run_identity_first(&img, TRAIN_PROMPT, cfg)?,
                };
                write_atomic(&out(&format!("styled_{i:03}.ppm")), &ppm(&run.image)?)?;
                let r = &run.row;
                let _ = writeln!(
                    csv,
                    "{i},{},{},{},{},{},",
                    r.order, r.intensity, r.attr_loss, r.ffc, r.seed
                );
                total += r.attr_loss;
            }
            write_atomic(&out("stylize.csv"), csv.as_bytes())?;
            Ok(format!(
                "stylize {order}: {faces} faces, mean attr_loss {:.3e}",
                total / *faces as f64
            ))
        }
        Action::Diffuse {
            faces,
            prompt,
            model,
            adapters,
        } => {
            let base = match model {
                Some(p) => load_model(p)?,
                None => DenoiserModel::init(pipeline_shape(), &mut root.split(TRAIN_DENOISER))?,
            };
            let set = match adapters {
                Some(p) => load_adapters(p)?,
                None => AdapterSet::default(),
            };
            let model = adapted_model(&base, &set)?;
            let codec = face_codec(cfg.image_size)?;
            let text = prompt_conditioning(prompt)?;
            let mut csv = String::from("face_id,latent\n");
            for (i, face) in face_grid(*faces, cmd.seed).iter().enumerate() {
                let guide = face_latent(&render_face(face, cfg.image_size)?, &codec)?;
                let rng = root.derive(&[DIFFUSE, i as u64]);
                let z = diffuse_latent(
                    &model,
                    &text,
                    Some(identity_embedding(&face.attrs)),
                    Some(&guide),
                    cfg,
                    &rng,
                )?;
                let decoded = codec.decode(&z)?;
                write_atomic(&out(&format!("diffused_{i:03}.ppm")), &gray(&decoded)?)?;
                let vals: Vec<String> = z.data().iter().map(f64::to_string).collect();
                let _ = writeln!(csv, "{i},{}", vals.join(" "));
            }
            write_atomic(&out("latents.csv"), csv.as_bytes())?;
            Ok(format!(
                "diffuse: {faces} latents, {} steps, window {}",
                cfg.steps, cfg.composition_window
            ))
        }
        Action::Train { faces, batch } => {
            let grid = face_grid(*faces, root.split(TRAIN_FACES).next_u64());
            let tc = TrainConfig {
                batch: *batch,
                ..TrainConfig::from_pipeline(cfg)
            };
            let base = train_toy_denoiser(&grid, cfg, &tc, &root.split(TRAIN_DENOISER))?;
            let lora = train_adapters(&base.model, &grid, cfg, &tc, &root.split(TRAIN_ADAPTERS))?;
            let json = serde_json::to_string(&base.model).map_err(|e| CliError::Io(e.to_string()))?;
            write_atomic(&out("model.json"), json.as_bytes())?;
            let mut buf = Vec::new();
            write_adapters(&lora.adapters, &mut buf)?;
            write_atomic(&out("adapters.csv"), &buf)?;
            let mut csv = String::from("phase,step,loss\n");
            for (k, l) in base.losses.iter().enumerate() {
                let _ = writeln!(csv, "denoiser,{k},{l}");
            }
            for (k, l) in lora.losses.iter().enumerate() {
                let _ = writeln!(csv, "lora,{k},{l}");
            }
            write_atomic(&out("losses.csv"), csv.as_bytes())?;
            Ok(format!(
                "train: denoiser eval loss {:.4} -> {:.4}, lora loss {:.4} -> {:.4}",
                base.eval_initial, base.eval_final, lora.eval_initial, lora.eval_final
            ))
        }
        Action::AblateOrder {
            faces,
            seeds,
            timing,
            prompt,
        } => {
            let grid = face_grid(*faces, cmd.seed);
            let sweep = OrderSweep {
                seeds: (0..*seeds).map(|k| cmd.seed.wrapping_add(k)).collect(),
                jobs: cmd.jobs,
                timing: *timing,
                prompt: prompt.clone(),
                ..OrderSweep::default()
            };
            let report = ablate_order(&grid, cfg, &sweep)?;
            write_atomic(&out("ablate_order.csv"), report.to_csv().as_bytes())?;
            let s = &report.summary;
            if s.win_rate < 1.0 {
                return Err(CliError::Assertion(format!("style-first lost in {} cells", s.cells)));
            }
            Ok(format!(
                "ablate-order: {} cells, win rate {:.1}%, strict {:.1}%, mean loss PS {:.3e} SP {:.3e}",
                s.cells,
                100.0 * s.win_rate,
                100.0 * s.strict_rate,
                s.mean_loss_ps,
                s.mean_loss_sp
            ))
        }
        Action::AblateAttention {
            faces,
            seeds,
            train_faces,
            arm_steps,
        } => {
            let grid = face_grid(*faces, root.split(TEST_FACES).next_u64());
            let mut sweep = AttentionSweep {
                seeds: (0..*seeds).collect(),
                train_faces: *train_faces,
                jobs: cmd.jobs,
                ..AttentionSweep::default()
            };
            sweep.train.steps = *arm_steps;
            let r = ablate_attention(&grid, cfg, &sweep)?;
            write_atomic(&out("ablate_attention.csv"), r.to_csv().as_bytes())?;
            let line = format!(
                "ablate-attention: mean ffc identity {:.4} baseline {:.4}, face mass identity {:.4} baseline {:.4}",
                r.mean_ffc_identity, r.mean_ffc_baseline, r.mean_mass_identity, r.mean_mass_baseline
            );
            if r.mean_ffc_identity < r.mean_ffc_baseline {
                return Err(CliError::Assertion(line));
            }
            Ok(line)
        }
        Action::Ffc { a, b } => {
            let v = ffc(&read_vector(a)?, &read_vector(b)?)?;
            Ok(format!("{v:.6}"))
        }
        Action::AttnMap { faces } => {
            let grid = face_grid(*faces, cmd.seed);
            let train_grid = face_grid(256, root.split(TRAIN_FACES).next_u64());
            let tc = TrainConfig {
                identity_dropout: 0.0,
                ..TrainConfig::from_pipeline(cfg)
            };
            let model = train_toy_denoiser(&train_grid, cfg, &tc, &root.split(TRAIN_DENOISER))?.model;
            let codec = face_codec(cfg.image_size)?;
            let text = prompt_conditioning(TRAIN_PROMPT)?;
            let mut csv = String::from("face_id,arm,face_mass\n");
            for (i, face) in grid.iter().enumerate() {
                let guide = face_latent(&render_face(face, cfg.image_size)?, &codec)?;
                let region = face_tokens(face);
                let arms = [("identity", Some(identity_embedding(&face.attrs))), ("baseline", None)];
                for (arm, id) in arms {
                    let map = face_map(&model, &guide, &text, id, cfg.steps)?;
                    write_atomic(&out(&format!("attn_{arm}_{i:03}.ppm")), &gray(&map)?)?;
                    write_atomic(&out(&format!("attn_{arm}_{i:03}.csv")), matrix_csv(&map).as_bytes())?;
                    let _ = writeln!(csv, "{i},{arm},{}", region_mass(&map, &region)?);
                }
            }
            write_atomic(&out("attn_mass.csv"), csv.as_bytes())?;
            Ok(format!("attn-map: {faces} faces, maps in {}", cmd.out_dir.display()))
        }
    }
}

fn face_map(
    model: &DenoiserModel<f64>,
    guide: &Tensor64,
    text: &Tensor64,
    id: Option<IdentityEmbedding<f64>>,
    steps: usize,
) -> Result<Tensor64, CliError> {
    let cond = Conditioning {
        text: text.clone(),
        identity: id.clone(),
    };
    let tokens = model.block_tokens(guide, 1, steps, &cond)?;
    Ok(attention_map(&tokens, id.as_ref(), &model.attn)?)
}

/// One line per query row, comma-separated key weights.
fn matrix_csv(m: &Tensor64) -> String {
    let mut s = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn ppm(img: &Tensor64) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_ppm(img, &mut buf)?;
    Ok(buf)
}

fn gray(map: &Tensor64) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_gray_ppm(map, &mut buf)?;
    Ok(buf)
}

fn load_model(path: &Path) -> Result<DenoiserModel<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let model: DenoiserModel<f64> =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if model.shape != pipeline_shape() {
        return Err(CliError::Usage(format!(
            "{}: unexpected model shape {:?}",
            path.display(),
            model.shape
        )));
    }
    Ok(model)
}

fn load_adapters(path: &Path) -> Result<AdapterSet<f64>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    read_adapters(BufReader::new(file)).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
