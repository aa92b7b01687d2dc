"""Output names shared by the model head, manifests and reports."""

# Column order of manifests, model outputs and report rows.
ATTRIBUTES = (
    "balancing_elements",
    "content",
    "color_harmony",
    "depth_of_field",
    "light",
    "object_emphasis",
    "rule_of_thirds",
    "vivid_color",
    "overall",
)

DISPLAY_NAMES = {
    "balancing_elements": "Balancing Elements",
    "content": "Content",
    "color_harmony": "Color Harmony",
    "depth_of_field": "Depth of Field",
    "light": "Light",
    "object_emphasis": "Object Emphasis",
    "rule_of_thirds": "Rule of Thirds",
    "vivid_color": "Vivid Colors",
    "overall": "Overall Aesthetic Score",
}

# Spearman rho of the full-scale model on the AADB test split (1000 images).
REFERENCE_RHO = {
    "balancing_elements": 0.186,
    "content": 0.584,
    "color_harmony": 0.475,
    "depth_of_field": 0.495,
    "light": 0.399,
    "object_emphasis": 0.666,
    "rule_of_thirds": 0.178,
    "vivid_color": 0.681,
    "overall": 0.689,
}
