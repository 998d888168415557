"""Desk-scale contrastive image-text alignment lab.

Symmetric InfoNCE training of small dual encoders over a seeded synthetic
paired corpus, with alternating full-report/section batching, ratio-enforcing
batch samplers, warmup+cosine scheduling and prompt-ensemble zero-shot
evaluation.
"""

__version__ = "0.1.0"

N_SECTIONS = 12

SECTION_NAMES = (
    "lower_thorax",
    "liver_biliary",
    "gallbladder",
    "spleen",
    "pancreas",
    "adrenal_glands",
    "kidneys_ureters",
    "gastrointestinal",
    "peritoneal_cavity",
    "pelvic_organs",
    "vasculature_lymph",
    "musculoskeletal",
)
