//! Flat `key = value` run configuration. `#` starts a comment; blank lines
//! are ignored; unknown or repeated keys are errors.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use crate::data::Density;
use crate::error::{Error, Result};
use crate::model::{Modalities, ModelConfig};
use crate::scenario::{Centerline, Homography, WaterwayConfig};
use crate::train::TrainConfig;
use crate::vgtb::FusionForm;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub waterway: WaterwayConfig,
    pub scenarios: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            waterway: WaterwayConfig {
                t_obs: model.t_obs,
                t_fut: model.t_fut,
                ..WaterwayConfig::default()
            },
            scenarios: 1,
            model,
            train: TrainConfig::default(),
        }
    }
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("`{key}`: cannot parse `{v}`"),
    })
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config {
            line,
            msg: format!("`{key}`: expected true or false, got `{v}`"),
        }),
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = BTreeSet::new();
    let mut curve = "sinusoid".to_string();
    let (mut amplitude, mut period, mut radius) = (0.12, 0.7, 0.42);
    let mut homography: Option<[[f64; 3]; 3]> = None;
    let (mut speed_min, mut speed_max) = cfg.waterway.speed_range;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, v) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            msg: format!("expected `key = value`, got `{content}`"),
        })?;
        let (key, v) = (key.trim(), v.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::Config {
                line,
                msg: format!("duplicate key `{key}`"),
            });
        }
        let w = &mut cfg.waterway;
        let m = &mut cfg.model;
        let t = &mut cfg.train;
        match key {
            "centerline" => curve = v.to_string(),
            "amplitude" => amplitude = value(line, key, v)?,
            "period" => period = value(line, key, v)?,
            "radius" => radius = value(line, key, v)?,
            "half_width" => w.half_width = value(line, key, v)?,
            "vessel_count" => w.vessel_count = value(line, key, v)?,
            "speed_min" => speed_min = value(line, key, v)?,
            "speed_max" => speed_max = value(line, key, v)?,
            "maneuver_prob" => w.maneuver_prob = value(line, key, v)?,
            "ais_noise" => w.ais_noise = value(line, key, v)?,
            "pixel_noise" => w.pixel_noise = value(line, key, v)?,
            "ais_dropout" => w.ais_dropout = value(line, key, v)?,
            "raster_size" => w.raster_size = value(line, key, v)?,
            "density" => {
                w.density = match v {
                    "auto" => None,
                    d => Some(Density::from_str(d).map_err(|msg| Error::Config { line, msg })?),
                }
            }
            "scenarios" => cfg.scenarios = value(line, key, v)?,
            "homography" => {
                let vals: Vec<f64> = v
                    .split(',')
                    .map(|x| value(line, key, x.trim()))
                    .collect::<Result<_>>()?;
                if vals.len() != 9 {
                    return Err(Error::Config {
                        line,
                        msg: format!("`homography` needs 9 comma-separated values, got {}", vals.len()),
                    });
                }
                homography = Some([
                    [vals[0], vals[1], vals[2]],
                    [vals[3], vals[4], vals[5]],
                    [vals[6], vals[7], vals[8]],
                ]);
            }
            "t_obs" => {
                m.t_obs = value(line, key, v)?;
                w.t_obs = m.t_obs;
            }
            "t_fut" => {
                m.t_fut = value(line, key, v)?;
                w.t_fut = m.t_fut;
            }
            "d" => m.d = value(line, key, v)?,
            "heads" => m.heads = value(line, key, v)?,
            "k_modes" => m.k_modes = value(line, key, v)?,
            "latent_dim" => m.latent_dim = value(line, key, v)?,
            "c_f" => m.c_f = value(line, key, v)?,
            "phi" => m.phi = value(line, key, v)?,
            "coord_scale" => m.coord_scale = value(line, key, v)?,
            "gamma_off" => m.gamma_off = value(line, key, v)?,
            "fusion" => {
                m.fusion = match v {
                    "gate_on_prior" => FusionForm::GateOnPrior,
                    "gate_on_base" => FusionForm::GateOnBase,
                    _ => {
                        return Err(Error::Config {
                            line,
                            msg: format!("`fusion`: expected gate_on_prior or gate_on_base, got `{v}`"),
                        })
                    }
                }
            }
            "modalities" => {
                m.modalities = match v {
                    "full" => Modalities::Full,
                    "ais_only" => Modalities::AisOnly,
                    _ => {
                        return Err(Error::Config {
                            line,
                            msg: format!("`modalities`: expected full or ais_only, got `{v}`"),
                        })
                    }
                }
            }
            "use_bank" => m.use_bank = boolean(line, key, v)?,
            "init_seed" => m.init_seed = value(line, key, v)?,
            "lr" => t.lr = value(line, key, v)?,
            "epochs" => t.epochs = value(line, key, v)?,
            "batch_size" => t.batch_size = value(line, key, v)?,
            "lr_factor" => t.lr_factor = value(line, key, v)?,
            "patience" => t.patience = value(line, key, v)?,
            "plateau_threshold" => t.plateau_threshold = value(line, key, v)?,
            "seed" => t.seed = value(line, key, v)?,
            "gamma_kl" => t.gamma_kl = value(line, key, v)?,
            "k_max" => t.k_max = value(line, key, v)?,
            "train_dark_rate" => t.train_dark_rate = value(line, key, v)?,
            "max_steps" => t.max_steps = Some(value(line, key, v)?),
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key `{key}`"),
                })
            }
        }
    }

    let w = &mut cfg.waterway;
    w.speed_range = (speed_min, speed_max);
    w.centerline = match curve.as_str() {
        "sinusoid" => Centerline::Sinusoid { amplitude, period },
        "straight" => Centerline::straight(),
        "arc" => Centerline::Arc { radius },
        other => {
            return Err(Error::Config {
                line: 0,
                msg: format!("`centerline`: expected sinusoid, straight or arc, got `{other}`"),
            })
        }
    };
    w.homography = match homography {
        Some(m) => Homography::new(m)?,
        None => Homography::default_camera(w.raster_size),
    };
    if cfg.scenarios == 0 {
        return Err(Error::Config {
            line: 0,
            msg: "`scenarios` must be positive".into(),
        });
    }
    w.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = parse_config("# nothing\n\n").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.waterway.t_fut, 36);
    }

    #[test]
    fn keys_are_applied() {
        let c = parse_config(
            "d = 16\nheads=4\nt_fut = 12 # short\nlr = 2e-3\ncenterline = arc\nradius = 0.3\nmodalities = ais_only\nuse_bank = false\nmax_steps = 200\nraster_size = 16\ndensity = high\n",
        )
        .unwrap();
        assert_eq!(c.model.d, 16);
        assert_eq!(c.model.heads, 4);
        assert_eq!((c.model.t_fut, c.waterway.t_fut), (12, 12));
        assert_eq!(c.train.lr, 2e-3);
        assert_eq!(c.waterway.centerline, Centerline::Arc { radius: 0.3 });
        assert_eq!(c.model.modalities, Modalities::AisOnly);
        assert!(!c.model.use_bank);
        assert_eq!(c.train.max_steps, Some(200));
        assert_eq!(c.waterway.homography, Homography::default_camera(16));
        assert_eq!(c.waterway.density, Some(Density::High));
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [
            ("d = 8\nbogus = 1\n", 2),
            ("d = x\n", 1),
            ("d = 8\n\nd = 9\n", 3),
            ("no equals sign\n", 1),
            ("homography = 1,2,3\n", 1),
        ] {
            match parse_config(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(parse_config("heads = 3\n").is_err());
        assert!(parse_config("homography = 1,2,3,2,4,6,0,0,1\n").is_err());
    }
}
