//! Channel and spatial attention, composed sequentially as CBAM.
//!
//! Both maps are sigmoid outputs, so every element lies strictly in (0,1).
//! Channel attention squeezes the spatial extent through average and max
//! pooling, runs both descriptors through one shared bias-free MLP, and sums
//! the results. Spatial attention pools across channels instead and pushes
//! the stacked `[avg; max]` pair through a single wide convolution.
//!
//! Spatial attention is implemented as channel-axis pooling, a 7x7
//! convolution over the stacked pair, then a sigmoid.

mod cbam;
mod channel;
mod spatial;

pub use cbam::Cbam;
pub use channel::ChannelAttention;
pub use spatial::SpatialAttention;

/// Canonical reduction ratio for the channel-attention MLP.
pub const DEFAULT_REDUCTION_RATIO: usize = 16;

/// Hidden width of the shared MLP: `max(1, floor(channels / ratio))`.
pub fn mlp_hidden_width(channels: usize, ratio: usize) -> usize {
    (channels / ratio).max(1)
}

/// Learnable scalars in one CBAM block: `2*C*hidden` for the shared MLP plus
/// `k*k*2` spatial-conv weights and its single bias.
pub fn cbam_param_count(channels: usize, ratio: usize, kernel: usize) -> usize {
    2 * channels * mlp_hidden_width(channels, ratio) + kernel * kernel * 2 + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_width_floors_with_minimum_one() {
        assert_eq!(mlp_hidden_width(256, 16), 16);
        assert_eq!(mlp_hidden_width(2, 16), 1);
        assert_eq!(mlp_hidden_width(20, 16), 1);
        assert_eq!(mlp_hidden_width(33, 16), 2);
    }

    #[test]
    fn param_count_closed_form() {
        assert_eq!(cbam_param_count(256, 16, 7), 2 * 256 * 16 + 99);
        assert_eq!(cbam_param_count(2, 16, 7), 2 * 2 * 1 + 99);
    }
}
