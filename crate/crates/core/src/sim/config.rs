use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimConfigError {
    #[error("capacity '{0}' must be positive")]
    NonPositive(&'static str),
    #[error("chunked_prefill_limit ({limit}) exceeds max_batch_tokens ({max})")]
    ChunkAboveBatch { limit: u32, max: u32 },
    #[error("invalid fault parameters: {0}")]
    Fault(String),
    #[error("failed to parse simulator config: {0}")]
    Parse(String),
}

/// Near-tie decode mode: every position's runner-up sits `gap` nats below the
/// argmax, and the engine occasionally emits the runner-up depending on the
/// batch it decodes in (a stand-in for batch-variant numerics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearTie {
    pub gap: f64,
    pub flip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum FaultSpec {
    /// Stale KV reuse: a prefix-cache lookup and the later pin of the looked-up
    /// block are not atomic, so a same-tick allocation can evict and
    /// repurpose the block in between.
    #[serde(rename = "F1_stale_kv")]
    StaleKv { occupancy_threshold: f64 },
    /// Engine stall: while a request with many parallel completions is in
    /// flight, every scheduler tick loses `stall_ms` to descheduling.
    #[serde(rename = "F2_engine_stall")]
    EngineStall {
        n_completions_threshold: u32,
        stall_ms: u64,
    },
    /// Adapter drift: the running-adapter snapshot diverges from the loaded
    /// set when a mixed-adapter queue, a LoRA burst, an in-flight adapter load
    /// and high KV occupancy coincide; an assertion fires `crash_delay_ticks`
    /// later.
    #[serde(rename = "F3_adapter_drift")]
    AdapterDrift {
        occupancy_threshold: f64,
        burst_count: u32,
        burst_window_ms: u64,
        min_adapter_classes: u32,
        crash_delay_ticks: u32,
    },
}

impl FaultSpec {
    pub fn stale_kv() -> Self {
        FaultSpec::StaleKv {
            occupancy_threshold: 0.6,
        }
    }

    pub fn engine_stall() -> Self {
        FaultSpec::EngineStall {
            n_completions_threshold: 8,
            stall_ms: 12_000,
        }
    }

    pub fn adapter_drift() -> Self {
        FaultSpec::AdapterDrift {
            occupancy_threshold: 0.7,
            burst_count: 6,
            burst_window_ms: 6,
            min_adapter_classes: 3,
            crash_delay_ticks: 20,
        }
    }

    /// Parses `F1`, `F2`, `F3` (or the full family names) into default specs.
    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "F1" | "F1_STALE_KV" => Some(Self::stale_kv()),
            "F2" | "F2_ENGINE_STALL" => Some(Self::engine_stall()),
            "F3" | "F3_ADAPTER_DRIFT" => Some(Self::adapter_drift()),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            FaultSpec::StaleKv { .. } => "F1_stale_kv",
            FaultSpec::EngineStall { .. } => "F2_engine_stall",
            FaultSpec::AdapterDrift { .. } => "F3_adapter_drift",
        }
    }

    fn validate(&self) -> Result<(), SimConfigError> {
        let occupancy_ok = |t: f64| (0.0..=1.0).contains(&t);
        match *self {
            FaultSpec::StaleKv {
                occupancy_threshold,
            } if !occupancy_ok(occupancy_threshold) => Err(SimConfigError::Fault(
                "F1 occupancy_threshold outside [0, 1]".into(),
            )),
            FaultSpec::EngineStall {
                n_completions_threshold: 0,
                ..
            } => Err(SimConfigError::Fault(
                "F2 n_completions_threshold must be positive".into(),
            )),
            FaultSpec::AdapterDrift {
                occupancy_threshold,
                burst_count,
                ..
            } if !occupancy_ok(occupancy_threshold) || burst_count == 0 => Err(
                SimConfigError::Fault("F3 needs burst_count > 0 and threshold in [0, 1]".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub vocab_size: u32,
    pub block_size_tokens: u32,
    pub total_kv_blocks: u32,
    pub max_batch_tokens: u32,
    pub chunked_prefill_limit: u32,
    pub max_running_requests: u32,
    pub max_loras_per_batch: u32,
    pub max_loaded_loras: u32,
    pub adapter_load_ticks: u32,
    /// Adapters the engine can serve besides BASE.
    pub known_adapters: Vec<String>,
    pub tick_ms: u64,
    pub seed: u64,
    /// Logprob distributions place the runner-up this far below the argmax.
    pub logprob_gap_min: f64,
    pub near_tie: Option<NearTie>,
    pub faults: Vec<FaultSpec>,
    /// Quantize arrivals to tick boundaries on a logical clock.
    pub deterministic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            block_size_tokens: 16,
            total_kv_blocks: 2048,
            max_batch_tokens: 8192,
            chunked_prefill_limit: 2048,
            max_running_requests: 64,
            max_loras_per_batch: 4,
            max_loaded_loras: 4,
            adapter_load_ticks: 4,
            known_adapters: ["lora_a", "lora_b", "lora_c", "lora_d", "lora_e", "lora_f"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            tick_ms: 5,
            seed: 0,
            logprob_gap_min: 0.8,
            near_tie: None,
            faults: Vec::new(),
            deterministic: true,
        }
    }
}

impl SimConfig {
    pub fn with_fault(mut self, fault: FaultSpec) -> Self {
        self.faults.push(fault);
        self
    }

    pub fn validate(&self) -> Result<(), SimConfigError> {
        let positives = [
            ("vocab_size", self.vocab_size as u64),
            ("block_size_tokens", self.block_size_tokens as u64),
            ("total_kv_blocks", self.total_kv_blocks as u64),
            ("max_batch_tokens", self.max_batch_tokens as u64),
            ("chunked_prefill_limit", self.chunked_prefill_limit as u64),
            ("max_running_requests", self.max_running_requests as u64),
            ("max_loras_per_batch", self.max_loras_per_batch as u64),
            ("max_loaded_loras", self.max_loaded_loras as u64),
            ("tick_ms", self.tick_ms),
        ];
        if let Some((name, _)) = positives.iter().find(|(_, v)| *v == 0) {
            return Err(SimConfigError::NonPositive(name));
        }
        if self.chunked_prefill_limit > self.max_batch_tokens {
            return Err(SimConfigError::ChunkAboveBatch {
                limit: self.chunked_prefill_limit,
                max: self.max_batch_tokens,
            });
        }
        self.faults.iter().try_for_each(FaultSpec::validate)
    }

    pub fn from_toml(text: &str) -> Result<Self, SimConfigError> {
        let cfg: SimConfig =
            toml::from_str(text).map_err(|e| SimConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stale_kv(&self) -> Option<f64> {
        self.faults.iter().find_map(|f| match f {
            FaultSpec::StaleKv {
                occupancy_threshold,
            } => Some(*occupancy_threshold),
            _ => None,
        })
    }

    pub fn engine_stall(&self) -> Option<(u32, u64)> {
        self.faults.iter().find_map(|f| match f {
            FaultSpec::EngineStall {
                n_completions_threshold,
                stall_ms,
            } => Some((*n_completions_threshold, *stall_ms)),
            _ => None,
        })
    }

    pub fn adapter_drift(&self) -> Option<&FaultSpec> {
        self.faults
            .iter()
            .find(|f| matches!(f, FaultSpec::AdapterDrift { .. }))
    }
}
