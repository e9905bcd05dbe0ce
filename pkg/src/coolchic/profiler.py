"""Decoder complexity accounting (one multiply-accumulate = 1 MAC)."""

from __future__ import annotations

from .arm import arm_parameter_count, count_arm_macs
from .bitstream import decoder_weight_bytes, header_size
from .latents import NUM_LEVELS, level_shapes
from .synthesis import count_synthesis_macs, count_upsampling_macs, synthesis_parameter_count


def mac_table(height, width, levels=NUM_LEVELS):
    """Per-pixel MAC budget of decoding a ``height`` x ``width`` image."""
    pixels = height * width
    latents = sum(h * w for h, w in level_shapes(height, width, levels))
    syn = count_synthesis_macs()
    arm_latent = count_arm_macs()
    arm_pixel = arm_latent * latents / pixels
    up_pixel = count_upsampling_macs(height, width, levels) / pixels
    return {
        "height": height,
        "width": width,
        "latents_per_pixel": latents / pixels,
        "synthesis_per_pixel": syn,
        "arm_per_latent": arm_latent,
        "arm_per_pixel": arm_pixel,
        "upsampling_per_pixel": up_pixel,
        "total_per_pixel": syn + arm_pixel + up_pixel,
        "synthesis_parameters": synthesis_parameter_count(),
        "arm_parameters": arm_parameter_count(),
        "decoder_weight_bytes": decoder_weight_bytes(),
        "header_bytes": header_size(levels),
    }


def format_table(table):
    rows = [
        ("synthesis MAC/pixel", f"{table['synthesis_per_pixel']}"),
        ("ARM MAC/latent", f"{table['arm_per_latent']}"),
        ("latents/pixel", f"{table['latents_per_pixel']:.4f}"),
        ("ARM MAC/pixel", f"{table['arm_per_pixel']:.1f}"),
        ("upsampling MAC/pixel", f"{table['upsampling_per_pixel']:.1f}"),
        ("total MAC/pixel", f"{table['total_per_pixel']:.1f}"),
        ("decoder parameters", f"{table['synthesis_parameters'] + table['arm_parameters']}"),
        ("decoder weight bytes", f"{table['decoder_weight_bytes']}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v:>10}" for k, v in rows)
