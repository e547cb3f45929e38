//! Model configuration and the packing plan derived from it.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerConfig {
    pub channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcLayerConfig {
    #[serde(rename = "in")]
    pub inputs: usize,
    #[serde(rename = "out")]
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_side: usize,
    pub n: usize,
    pub slot_count: usize,
    #[serde(default)]
    pub conv: Vec<ConvLayerConfig>,
    pub fc: Vec<FcLayerConfig>,
    #[serde(default)]
    pub final_activation: bool,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("model config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    /// Number of input channels: the first conv layer's, or for a purely
    /// dense model whatever the first FC layer implies.
    pub fn input_channels(&self) -> usize {
        match self.conv.first() {
            Some(l) => l.channels,
            None => {
                let area = self.input_side * self.input_side;
                self.fc.first().map_or(1, |fc| fc.inputs.checked_div(area).map_or(1, |c| c.max(1)))
            }
        }
    }

    pub fn output_count(&self) -> usize {
        self.fc.last().map_or(0, |l| l.outputs)
    }

    /// CNN 1-2: one convolution and two dense layers at 4096 slots.
    pub fn cnn_1_2() -> Self {
        ModelConfig {
            input_side: 28,
            n: 64,
            slot_count: 4096,
            conv: vec![ConvLayerConfig { channels: 1, filters: 4, kernel: 7, stride: 3 }],
            fc: vec![
                FcLayerConfig { inputs: 256, outputs: 64 },
                FcLayerConfig { inputs: 64, outputs: 10 },
            ],
            final_activation: false,
        }
    }

    /// The two-conv, two-dense toy model of the worked example.
    pub fn worked_example() -> Self {
        ModelConfig {
            input_side: 8,
            n: 2,
            slot_count: 8,
            conv: vec![
                ConvLayerConfig { channels: 1, filters: 2, kernel: 2, stride: 2 },
                ConvLayerConfig { channels: 2, filters: 1, kernel: 2, stride: 2 },
            ],
            fc: vec![
                FcLayerConfig { inputs: 4, outputs: 2 },
                FcLayerConfig { inputs: 2, outputs: 2 },
            ],
            final_activation: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PackingMode {
    Baseline,
    CrossChannel,
    CrossFilter,
}

impl PackingMode {
    /// The mode the following conv layer runs in, given the layout this
    /// layer emits.
    pub fn successor(self) -> PackingMode {
        match self {
            PackingMode::Baseline => PackingMode::Baseline,
            PackingMode::CrossChannel => PackingMode::CrossFilter,
            PackingMode::CrossFilter => PackingMode::CrossChannel,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PackingMode::Baseline => "baseline",
            PackingMode::CrossChannel => "cross-channel",
            PackingMode::CrossFilter => "cross-filter",
        }
    }
}

impl std::str::FromStr for PackingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(PackingMode::Baseline),
            "cross-channel" | "cross_channel" => Ok(PackingMode::CrossChannel),
            "cross-filter" | "cross_filter" => Ok(PackingMode::CrossFilter),
            other => Err(Error::InvalidParameter(format!("unknown packing mode '{other}'"))),
        }
    }
}

/// `Auto` picks the first conv layer's mode from the shape of the model;
/// `Forced` fixes it. Later layers always follow the layout the previous
/// layer emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PackingChoice {
    #[default]
    Auto,
    Forced(PackingMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanOptions {
    pub packing: PackingChoice,
    /// Square activations on hidden layers. Off only for the toy example.
    pub activation: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { packing: PackingChoice::Auto, activation: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcType {
    /// Several distinct pi-sets per ciphertext.
    TypeI,
    /// One pi-set replicated across the ciphertext.
    TypeII,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvPlan {
    pub channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub combined_kernel: usize,
    pub combined_stride: usize,
    /// Side of this layer's output ciphertext grid.
    pub out_side: usize,
    pub mode: PackingMode,
    /// Ciphertexts along the channel axis of the input grid.
    pub in_groups: usize,
    /// Ciphertexts along the channel axis of the output grid.
    pub out_groups: usize,
    /// Filter ciphertexts: out_groups-or-filters × in_groups-or-channels × k².
    pub filter_groups: usize,
    pub filter_channel_groups: usize,
    pub activation: bool,
}

impl ConvPlan {
    pub fn filter_ciphertexts(&self) -> usize {
        self.filter_groups * self.filter_channel_groups * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FcPlan {
    pub input_type: FcType,
    pub inputs: usize,
    pub outputs: usize,
    /// ι′: input ciphertext count.
    pub in_cts: usize,
    /// ι″: pi-sets per input ciphertext (Type I), 1 for Type II.
    pub pisets_per_ct: usize,
    pub out_cts: usize,
    /// Pi-set position map inside a Type I input ciphertext: local pi-set q
    /// sits at pi-set slot `(q / chunk)·chunk_stride + q % chunk`.
    pub chunk: usize,
    pub chunk_stride: usize,
    pub activation: bool,
}

impl FcPlan {
    pub fn piset_position(&self, q: usize) -> usize {
        (q / self.chunk) * self.chunk_stride + q % self.chunk
    }

    pub fn weight_ciphertexts(&self) -> usize {
        match self.input_type {
            FcType::TypeI => self.outputs * self.in_cts,
            FcType::TypeII => self.inputs * self.out_cts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackingPlan {
    pub input_side: usize,
    pub input_channels: usize,
    pub n: usize,
    pub slots: usize,
    /// β̃₀: side of the combined layer's output grid.
    pub output_grid: usize,
    /// Whether the combined stride divides the input exactly.
    pub grid_exact: bool,
    pub packing_factor: usize,
    pub conv: Vec<ConvPlan>,
    pub fc: Vec<FcPlan>,
    pub activation: bool,
    pub final_activation: bool,
    /// Key levels for inference.
    pub levels: u32,
}

impl PackingPlan {
    /// γ̃₀ (1 for a dense-only model).
    pub fn input_grid_side(&self) -> usize {
        self.conv.first().map_or(1, |c| c.combined_kernel)
    }

    pub fn input_stride(&self) -> usize {
        self.conv.first().map_or(1, |c| c.combined_stride)
    }

    pub fn input_mode(&self) -> PackingMode {
        self.conv.first().map_or(PackingMode::Baseline, |c| c.mode)
    }

    /// Slots one copy of a channel occupies: n·β̃₀².
    pub fn block_len(&self) -> usize {
        self.n * self.output_grid * self.output_grid
    }

    /// Distance between replica or channel-group blocks.
    pub fn block_stride(&self) -> usize {
        self.slots / self.packing_factor
    }

    pub fn input_ciphertexts(&self) -> usize {
        let side = self.input_grid_side();
        let groups = match self.input_mode() {
            PackingMode::CrossChannel => self.input_channels.div_ceil(self.packing_factor),
            _ => self.input_channels,
        };
        groups * side * side
    }

    pub fn filter_ciphertexts(&self) -> Vec<usize> {
        self.conv.iter().map(ConvPlan::filter_ciphertexts).collect()
    }

    pub fn weight_ciphertexts(&self) -> Vec<usize> {
        self.fc.iter().map(FcPlan::weight_ciphertexts).collect()
    }

    /// Sequential ⊗/CMult levels consumed from fresh inputs to the logits.
    pub fn depth(&self) -> u32 {
        let layers = (self.conv.len() + self.fc.len()) as u32;
        if self.activation {
            2 * layers - 1 + self.final_activation as u32
        } else {
            layers
        }
    }

    pub fn summary(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "slots S = {}, inputs n = {}, levels L = {}", self.slots, self.n, self.levels);
        let _ = writeln!(
            s,
            "output grid side = {}{}, packing factor r = {}",
            self.output_grid,
            if self.grid_exact { "" } else { " (trailing pixels unused)" },
            self.packing_factor
        );
        for (l, c) in self.conv.iter().enumerate() {
            let _ = writeln!(
                s,
                "CL{}: combined kernel {}, combined stride {}, out side {}, mode {}, filter cts {}",
                l + 1,
                c.combined_kernel,
                c.combined_stride,
                c.out_side,
                c.mode.name(),
                c.filter_ciphertexts()
            );
        }
        for (l, f) in self.fc.iter().enumerate() {
            let _ = writeln!(
                s,
                "FL{}: type {}, in cts {}, pi-sets per ct {}, out cts {}, weight cts {}",
                l + 1,
                match f.input_type {
                    FcType::TypeI => "I",
                    FcType::TypeII => "II",
                },
                f.in_cts,
                f.pisets_per_ct,
                f.out_cts,
                f.weight_ciphertexts()
            );
        }
        let _ = write!(s, "input cts {}, depth {}", self.input_ciphertexts(), self.depth());
        s
    }
}

impl fmt::Display for PackingPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.summary())
    }
}

/// Combined kernel side and stride of the stack from each layer to the end.
pub fn derive_combined_params(layers: &[ConvLayerConfig]) -> Vec<(usize, usize)> {
    let c = layers.len();
    let out: Vec<(usize, usize)> = (0..c)
        .map(|l| {
            let mut side = 1;
            let mut prod = 1;
            for layer in &layers[l..] {
                side += (layer.kernel - 1) * prod;
                prod *= layer.stride;
            }
            (side, prod)
        })
        .collect();
    debug_assert!(recurrence_holds(layers, &out));
    out
}

fn recurrence_holds(layers: &[ConvLayerConfig], combined: &[(usize, usize)]) -> bool {
    let c = layers.len();
    if c == 0 {
        return true;
    }
    if combined[c - 1] != (layers[c - 1].kernel, layers[c - 1].stride) {
        return false;
    }
    (0..c - 1).all(|l| {
        let (g, d) = combined[l];
        let (g1, d1) = combined[l + 1];
        g >= layers[l].kernel
            && g1 == 1 + (g - layers[l].kernel) / layers[l].stride
            && d == layers[l].stride * d1
    })
}

/// β̃₀ and whether the combined stride tiles the input exactly.
pub fn derive_output_grid(input_side: usize, kernel: usize, stride: usize) -> Result<(usize, bool)> {
    if stride == 0 {
        return Err(Error::InvalidParameter("combined stride must be positive".into()));
    }
    if input_side < kernel {
        return Err(Error::Validation(format!(
            "input side {input_side} is smaller than the combined kernel side {kernel}"
        )));
    }
    let span = input_side - kernel;
    Ok((1 + span / stride, span.is_multiple_of(stride)))
}

pub fn compute_packing_factor(slots: usize, n: usize, grid: usize) -> Result<usize> {
    let needed = n * grid * grid;
    if needed == 0 || needed > slots {
        return Err(Error::Capacity { needed, available: slots });
    }
    let ratio = slots / needed;
    Ok(1 << (usize::BITS - 1 - ratio.leading_zeros()))
}

/// ι″ for a Type I layer fed by a Type II layer's `in_cts` output
/// ciphertexts, which hold `slots/n` pi-sets each.
pub fn split_pisets(inputs: usize, in_cts: usize, slots: usize, n: usize) -> Result<usize> {
    if in_cts == 0 || !inputs.is_multiple_of(in_cts) {
        return Err(Error::Validation(format!(
            "{inputs} pi-sets do not split evenly over {in_cts} ciphertexts"
        )));
    }
    let per = inputs / in_cts;
    if in_cts > 1 && per != slots / n {
        return Err(Error::Validation(format!(
            "{inputs} pi-sets over {in_cts} ciphertexts leaves a partial ciphertext ({} pi-sets fit)",
            slots / n
        )));
    }
    Ok(per)
}

pub fn validate_model(config: &ModelConfig) -> Result<PackingPlan> {
    validate_model_with(config, PlanOptions::default())
}

pub fn validate_model_with(config: &ModelConfig, opts: PlanOptions) -> Result<PackingPlan> {
    let s = config.slot_count;
    let n = config.n;
    if s == 0 || !s.is_power_of_two() {
        return Err(Error::Validation(format!("slot count {s} is not a power of two")));
    }
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Validation(format!("input count n = {n} is not a power of two")));
    }
    if n > s {
        return Err(Error::Capacity { needed: n, available: s });
    }
    if config.fc.is_empty() {
        return Err(Error::Validation("a model needs at least one fully-connected layer".into()));
    }
    if config.input_side == 0 {
        return Err(Error::Validation("input side must be positive".into()));
    }
    for (l, c) in config.conv.iter().enumerate() {
        if c.channels == 0 || c.filters == 0 || c.kernel == 0 || c.stride == 0 {
            return Err(Error::Validation(format!("CL{}: all fields must be positive", l + 1)));
        }
        if l > 0 && c.channels != config.conv[l - 1].filters {
            return Err(Error::Validation(format!(
                "CL{}: {} input channels but CL{} emits {}",
                l + 1,
                c.channels,
                l,
                config.conv[l - 1].filters
            )));
        }
    }
    for (l, f) in config.fc.iter().enumerate() {
        if f.inputs == 0 || f.outputs == 0 {
            return Err(Error::Validation(format!("FL{}: all fields must be positive", l + 1)));
        }
        if l > 0 && f.inputs != config.fc[l - 1].outputs {
            return Err(Error::Validation(format!(
                "FL{}: {} inputs but FL{} emits {}",
                l + 1,
                f.inputs,
                l,
                config.fc[l - 1].outputs
            )));
        }
    }

    let combined = derive_combined_params(&config.conv);
    let (gk, gs) = combined.first().copied().unwrap_or((1, 1));
    let (grid, exact) = derive_output_grid(config.input_side, gk, gs)?;
    let r = compute_packing_factor(s, n, grid)?;
    let channels = config.input_channels();

    let modes = choose_modes(config, r, opts.packing)?;
    let mut conv = Vec::with_capacity(config.conv.len());
    for (l, c) in config.conv.iter().enumerate() {
        let mode = modes[l];
        let (ck, cs) = combined[l];
        let out_side = 1 + (ck - c.kernel) / c.stride;
        let (in_groups, out_groups, filter_groups, filter_channel_groups) = match mode {
            PackingMode::Baseline => (c.channels, c.filters, c.filters, c.channels),
            PackingMode::CrossChannel => {
                let g = c.channels.div_ceil(r);
                (g, c.filters, c.filters, g)
            }
            PackingMode::CrossFilter => {
                let g = c.filters.div_ceil(r);
                (c.channels, g, g, c.channels)
            }
        };
        conv.push(ConvPlan {
            channels: c.channels,
            filters: c.filters,
            kernel: c.kernel,
            stride: c.stride,
            combined_kernel: ck,
            combined_stride: cs,
            out_side,
            mode,
            in_groups,
            out_groups,
            filter_groups,
            filter_channel_groups,
            activation: opts.activation,
        });
    }
    if let Some(last) = conv.last() {
        assert_eq!(last.out_side, 1, "combined layer must end on a single window");
    }

    let area = grid * grid;
    let mut fc = Vec::with_capacity(config.fc.len());
    for (l, f) in config.fc.iter().enumerate() {
        let last = l + 1 == config.fc.len();
        let activation = opts.activation && (!last || config.final_activation);
        let input_type = if l % 2 == 0 { FcType::TypeI } else { FcType::TypeII };
        let plan = match input_type {
            FcType::TypeI => {
                let (in_cts, per, chunk, chunk_stride) = if l == 0 {
                    let (feature_maps, last_mode) = match conv.last() {
                        Some(c) => (c.filters, c.mode),
                        None => (channels, PackingMode::Baseline),
                    };
                    if f.inputs != feature_maps * area {
                        return Err(Error::Validation(format!(
                            "FL1 expects {} inputs but the conv stack emits {} ({} maps of {}x{})",
                            f.inputs,
                            feature_maps * area,
                            feature_maps,
                            grid,
                            grid
                        )));
                    }
                    if last_mode == PackingMode::CrossFilter {
                        if feature_maps % r != 0 {
                            return Err(Error::Validation(format!(
                                "cross-filter output of {feature_maps} maps does not fill groups of r = {r}"
                            )));
                        }
                        (feature_maps / r, r * area, area, s / (r * n))
                    } else {
                        (feature_maps, area, area, area)
                    }
                } else {
                    let prev = &fc[l - 1];
                    let FcPlan { out_cts, .. } = prev;
                    let per = split_pisets(f.inputs, *out_cts, s, n)?;
                    (*out_cts, per, per, per)
                };
                let used = ((per - 1) / chunk) * chunk_stride + (per - 1) % chunk + 1;
                if used * n > s {
                    return Err(Error::Capacity { needed: used * n, available: s });
                }
                FcPlan {
                    input_type,
                    inputs: f.inputs,
                    outputs: f.outputs,
                    in_cts,
                    pisets_per_ct: per,
                    out_cts: f.outputs,
                    chunk,
                    chunk_stride,
                    activation,
                }
            }
            FcType::TypeII => FcPlan {
                input_type,
                inputs: f.inputs,
                outputs: f.outputs,
                in_cts: f.inputs,
                pisets_per_ct: 1,
                out_cts: (f.outputs * n).div_ceil(s),
                chunk: 1,
                chunk_stride: 1,
                activation,
            },
        };
        fc.push(plan);
    }

    let layers = (config.conv.len() + config.fc.len()) as u32;
    let levels = 2 * layers + (opts.activation && config.final_activation) as u32;
    Ok(PackingPlan {
        input_side: config.input_side,
        input_channels: channels,
        n,
        slots: s,
        output_grid: grid,
        grid_exact: exact,
        packing_factor: r,
        conv,
        fc,
        activation: opts.activation,
        final_activation: config.final_activation,
        levels,
    })
}

fn choose_modes(config: &ModelConfig, r: usize, choice: PackingChoice) -> Result<Vec<PackingMode>> {
    let c = config.conv.len();
    if c == 0 {
        return Ok(Vec::new());
    }
    let first = match choice {
        PackingChoice::Forced(m) => m,
        PackingChoice::Auto if r == 1 => PackingMode::Baseline,
        PackingChoice::Auto => {
            let l0 = &config.conv[0];
            if l0.channels > 1 {
                PackingMode::CrossChannel
            } else if l0.filters > 1 {
                PackingMode::CrossFilter
            } else {
                PackingMode::Baseline
            }
        }
    };
    let mut modes = vec![first];
    for _ in 1..c {
        let prev = *modes.last().unwrap();
        modes.push(prev.successor());
    }
    let last = &config.conv[c - 1];
    if modes[c - 1] == PackingMode::CrossFilter && !last.filters.is_multiple_of(r) {
        match choice {
            PackingChoice::Auto => return Ok(vec![PackingMode::Baseline; c]),
            PackingChoice::Forced(_) => {
                return Err(Error::Validation(format!(
                    "cross-filter last layer needs its {} filters to be a multiple of r = {r}",
                    last.filters
                )))
            }
        }
    }
    Ok(modes)
}
