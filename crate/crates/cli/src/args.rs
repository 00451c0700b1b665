use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use graffiti_core::identity::ProjectionMode;
use graffiti_core::pipeline::{Order, PipelineConfig, TRAIN_PROMPT};

use crate::CliError;

pub const SEED_ENV: &str = "CRAFT_SEED";
pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Parser, Debug)]
#[command(
    name = "graffiti",
    version,
    about = "Identity-preserving stylization experiments on synthetic faces"
)]
struct Cli {
    #[command(subcommand)]
    action: RawAction,
    #[command(flatten)]
    common: RawCommon,
}

#[derive(Args, Debug, Default)]
struct RawCommon {
    /// Root seed; falls back to the config file, then CRAFT_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// JSON file with PipelineConfig fields; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for sweeps; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Composition window in reverse steps.
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    guidance: Option<f64>,
    /// Blend weight toward the guide inside the window.
    #[arg(long, global = true)]
    subject_guidance: Option<f64>,
    #[arg(long, global = true)]
    intensity: Option<f64>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    image_size: Option<usize>,
    /// Run the denoiser texture pass in stylize and ablate-order.
    #[arg(long, global = true)]
    diffusion: Option<bool>,
    #[arg(long, global = true)]
    beta_start: Option<f64>,
    #[arg(long, global = true)]
    beta_end: Option<f64>,
    #[arg(long, global = true, value_enum)]
    projection: Option<Projection>,
    #[arg(long, global = true)]
    train_steps: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Projection {
    Rerender,
    Optimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OrderArg {
    Ps,
    Sp,
}

#[derive(Subcommand, Debug)]
enum RawAction {
    /// Render synthetic faces and their attribute table.
    Render {
        #[arg(long, default_value_t = 1)]
        faces: usize,
    },
    /// Stylise faces through the style-first or identity-first flow.
    Stylize {
        #[arg(long, default_value_t = 1)]
        faces: usize,
        #[arg(long, value_enum, default_value_t = OrderArg::Ps)]
        order: OrderArg,
    },
    /// Sample latents guided by rendered faces.
    Diffuse {
        #[arg(long, default_value_t = 1)]
        faces: usize,
        #[arg(long, default_value = TRAIN_PROMPT)]
        prompt: String,
        /// Denoiser JSON written by `train`; an untrained model otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Adapter CSV written by `train`.
        #[arg(long)]
        adapters: Option<PathBuf>,
    },
    /// Train the toy denoiser, then LoRA adapters over the frozen result.
    Train {
        #[arg(long, default_value_t = 64)]
        faces: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Compare style-first and identity-first losses over a face grid.
    AblateOrder {
        #[arg(long, default_value_t = 100)]
        faces: usize,
        /// Number of sweep seeds, counted up from --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Record per-row wall time (output then varies between runs).
        #[arg(long)]
        timing: bool,
        #[arg(long, default_value = TRAIN_PROMPT)]
        prompt: String,
    },
    /// Compare identity-augmented and plain attention arms.
    AblateAttention {
        #[arg(long, default_value_t = 20)]
        faces: usize,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 256)]
        train_faces: usize,
        /// Training updates per arm.
        #[arg(long, default_value_t = 3000)]
        arm_steps: usize,
    },
    /// Cosine similarity of two embedding files.
    Ffc { a: PathBuf, b: PathBuf },
    /// Export attention maps with and without the identity embedding.
    AttnMap {
        #[arg(long, default_value_t = 1)]
        faces: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Render {
        faces: usize,
    },
    Stylize {
        faces: usize,
        order: Order,
    },
    Diffuse {
        faces: usize,
        prompt: String,
        model: Option<PathBuf>,
        adapters: Option<PathBuf>,
    },
    Train {
        faces: usize,
        batch: usize,
    },
    AblateOrder {
        faces: usize,
        seeds: u64,
        timing: bool,
        prompt: String,
    },
    AblateAttention {
        faces: usize,
        seeds: u64,
        train_faces: usize,
        arm_steps: usize,
    },
    Ffc {
        a: PathBuf,
        b: PathBuf,
    },
    AttnMap {
        faces: usize,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Render { .. } => "render",
            Action::Stylize { .. } => "stylize",
            Action::Diffuse { .. } => "diffuse",
            Action::Train { .. } => "train",
            Action::AblateOrder { .. } => "ablate-order",
            Action::AblateAttention { .. } => "ablate-attention",
            Action::Ffc { .. } => "ffc",
            Action::AttnMap { .. } => "attn-map",
        }
    }
}

/// Fully resolved invocation. `config.seed` always equals `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct Command {
    pub action: Action,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub config: PipelineConfig,
}

/// Parses `argv` (without the program name), reading `CRAFT_SEED` from the environment.
pub fn parse<I, S>(argv: I) -> Result<Command, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    parse_with_env(argv, std::env::var(SEED_ENV).ok().as_deref())
}

pub fn parse_with_env<I, S>(argv: I, env_seed: Option<&str>) -> Result<Command, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args = std::iter::once(OsString::from("graffiti")).chain(argv.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(args).map_err(CliError::Clap)?;
    resolve(cli, env_seed)
}

fn resolve(cli: Cli, env_seed: Option<&str>) -> Result<Command, CliError> {
    let c = cli.common;
    let (mut config, file_has_seed) = match &c.config {
        Some(path) => load_config(path)?,
        None => (PipelineConfig::default(), false),
    };
    let env_seed = match env_seed {
        Some(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
        ),
        None => None,
    };
    let seed = match (c.seed, file_has_seed, env_seed) {
        (Some(s), _, _) => s,
        (None, true, _) => config.seed,
        (None, false, Some(s)) => s,
        (None, false, None) => 0,
    };
    config.seed = seed;
    overlay(&mut config.steps, c.steps);
    overlay(&mut config.composition_window, c.window);
    overlay(&mut config.guidance_scale, c.guidance);
    overlay(&mut config.subject_guidance, c.subject_guidance);
    overlay(&mut config.style_intensity, c.intensity);
    overlay(&mut config.lora_rank, c.rank);
    overlay(&mut config.lora_alpha, c.alpha);
    overlay(&mut config.image_size, c.image_size);
    overlay(&mut config.use_diffusion, c.diffusion);
    overlay(&mut config.beta_start, c.beta_start);
    overlay(&mut config.beta_end, c.beta_end);
    overlay(
        &mut config.projection,
        c.projection.map(|p| match p {
            Projection::Rerender => ProjectionMode::ReRender,
            Projection::Optimize => ProjectionMode::Optimize,
        }),
    );
    overlay(&mut config.train_steps, c.train_steps);
    overlay(&mut config.learning_rate, c.lr);
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let action = match cli.action {
        RawAction::Render { faces } => Action::Render { faces },
        RawAction::Stylize { faces, order } => Action::Stylize {
            faces,
            order: match order {
                OrderArg::Ps => Order::PS,
                OrderArg::Sp => Order::SP,
            },
        },
        RawAction::Diffuse {
            faces,
            prompt,
            model,
            adapters,
        } => Action::Diffuse {
            faces,
            prompt,
            model,
            adapters,
        },
        RawAction::Train { faces, batch } => Action::Train { faces, batch },
        RawAction::AblateOrder {
            faces,
            seeds,
            timing,
            prompt,
        } => Action::AblateOrder {
            faces,
            seeds,
            timing,
            prompt,
        },
        RawAction::AblateAttention {
            faces,
            seeds,
            train_faces,
            arm_steps,
        } => Action::AblateAttention {
            faces,
            seeds,
            train_faces,
            arm_steps,
        },
        RawAction::Ffc { a, b } => Action::Ffc { a, b },
        RawAction::AttnMap { faces } => Action::AttnMap { faces },
    };
    check_action(&action)?;
    Ok(Command {
        action,
        seed,
        out_dir: c.out_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
        jobs: c.jobs.unwrap_or(0),
        config,
    })
}

fn overlay<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_config(path: &PathBuf) -> Result<(PipelineConfig, bool), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let has_seed = value.get("seed").is_some();
    let cfg = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    Ok((cfg, has_seed))
}

fn check_action(a: &Action) -> Result<(), CliError> {
    let positive = |n: usize, what: &str| {
        if n == 0 {
            Err(CliError::Usage(format!("--{what} must be at least 1")))
        } else {
            Ok(())
        }
    };
    match a {
        Action::Render { faces } | Action::Stylize { faces, .. } | Action::AttnMap { faces } => {
            positive(*faces, "faces")
        }
        Action::Diffuse { faces, prompt, .. } => {
            positive(*faces, "faces")?;
            non_empty(prompt)
        }
        Action::Train { faces, batch } => {
            positive(*faces, "faces")?;
            positive(*batch, "batch")
        }
        Action::AblateOrder {
            faces, seeds, prompt, ..
        } => {
            positive(*faces, "faces")?;
            positive(*seeds as usize, "seeds")?;
            non_empty(prompt)
        }
        Action::AblateAttention {
            faces,
            seeds,
            train_faces,
            ..
        } => {
            positive(*faces, "faces")?;
            positive(*seeds as usize, "seeds")?;
            positive(*train_faces, "train-faces")
        }
        Action::Ffc { .. } => Ok(()),
    }
}

fn non_empty(prompt: &str) -> Result<(), CliError> {
    if prompt.split_whitespace().next().is_none() {
        return Err(CliError::Usage("--prompt must contain a word".into()));
    }
    Ok(())
}

impl Command {
    /// Arguments that re-parse to this exact command, with every config value explicit.
    pub fn to_args(&self) -> Vec<String> {
        let mut v = vec![self.action.name().to_string()];
        let mut push = |k: &str, val: String| {
            v.push(format!("--{k}"));
            v.push(val);
        };
        let path = |p: &PathBuf| p.display().to_string();
        match &self.action {
            Action::Render { faces } | Action::AttnMap { faces } => push("faces", faces.to_string()),
            Action::Stylize { faces, order } => {
                push("faces", faces.to_string());
                push("order", order.to_string().to_lowercase());
            }
            Action::Diffuse {
                faces,
                prompt,
                model,
                adapters,
            } => {
                push("faces", faces.to_string());
                push("prompt", prompt.clone());
                if let Some(m) = model {
                    push("model", path(m));
                }
                if let Some(a) = adapters {
                    push("adapters", path(a));
                }
            }
            Action::Train { faces, batch } => {
                push("faces", faces.to_string());
                push("batch", batch.to_string());
            }
            Action::AblateOrder {
                faces,
                seeds,
                timing,
                prompt,
            } => {
                push("faces", faces.to_string());
                push("seeds", seeds.to_string());
                push("prompt", prompt.clone());
                if *timing {
                    v.push("--timing".into());
                }
            }
            Action::AblateAttention {
                faces,
                seeds,
                train_faces,
                arm_steps,
            } => {
                push("faces", faces.to_string());
                push("seeds", seeds.to_string());
                push("train-faces", train_faces.to_string());
                push("arm-steps", arm_steps.to_string());
            }
            Action::Ffc { a, b } => {
                v.push(path(a));
                v.push(path(b));
            }
        }
        let c = &self.config;
        let mut push = |k: &str, val: String| {
            v.push(format!("--{k}"));
            v.push(val);
        };
        push("seed", self.seed.to_string());
        push("out-dir", path(&self.out_dir));
        push("jobs", self.jobs.to_string());
        push("steps", c.steps.to_string());
        push("window", c.composition_window.to_string());
        push("guidance", c.guidance_scale.to_string());
        push("subject-guidance", c.subject_guidance.to_string());
        push("intensity", c.style_intensity.to_string());
        push("rank", c.lora_rank.to_string());
        push("alpha", c.lora_alpha.to_string());
        push("image-size", c.image_size.to_string());
        push("diffusion", c.use_diffusion.to_string());
        push("beta-start", c.beta_start.to_string());
        push("beta-end", c.beta_end.to_string());
        push(
            "projection",
            match c.projection {
                ProjectionMode::ReRender => "rerender",
                ProjectionMode::Optimize => "optimize",
            }
            .into(),
        );
        push("train-steps", c.train_steps.to_string());
        push("lr", c.learning_rate.to_string());
        v
    }

    /// One shell-quoted line, `graffiti <args>`.
    pub fn header(&self) -> String {
        let args = self.to_args();
        let quoted = shlex::try_join(args.iter().map(String::as_str)).expect("arguments contain no NUL bytes");
        format!("graffiti {quoted}")
    }

    /// Inverse of [`Command::header`]. Ignores the environment seed, since the header is explicit.
    pub fn from_header(line: &str) -> Result<Command, CliError> {
        let words =
            shlex::split(line.trim()).ok_or_else(|| CliError::Usage(format!("unbalanced quotes in {line:?}")))?;
        match words.split_first() {
            Some((prog, rest)) if prog == "graffiti" => parse_with_env(rest, None),
            _ => Err(CliError::Usage(format!("not a run header: {line:?}"))),
        }
    }
}
