#![allow(dead_code)]

use cmivtp::data::VesselSample;
use cmivtp::model::ModelConfig;
use cmivtp::scenario::{generate_dataset, Homography, WaterwayConfig};

pub fn waterway(vessels: usize, t_obs: usize, t_fut: usize, raster: usize) -> WaterwayConfig {
    WaterwayConfig {
        vessel_count: vessels,
        t_obs,
        t_fut,
        raster_size: raster,
        homography: Homography::default_camera(raster),
        ..WaterwayConfig::default()
    }
}

pub fn dataset(vessels: usize, scenarios: usize, seed: u64) -> Vec<VesselSample> {
    generate_dataset(&waterway(vessels, 4, 3, 16), scenarios, seed).unwrap()
}

pub fn model_cfg(d: usize) -> ModelConfig {
    ModelConfig {
        d,
        heads: 2,
        k_modes: 2,
        latent_dim: 4,
        t_obs: 4,
        t_fut: 3,
        c_f: 4,
        ..ModelConfig::default()
    }
}
