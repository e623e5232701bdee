import pytest

from gradchecks import TOL, all_checks

RESULTS = {}


def _results():
    if not RESULTS:
        RESULTS.update(all_checks())
    return RESULTS


@pytest.mark.parametrize("name", ["time_encoder", "vanilla_prompt", "transformer_prompt", "projection_prompt",
                                  "static_output_prompt", "static_input_prompt", "fusion_mlp", "link_head",
                                  "node_head"])
def test_component_gradients_match_finite_differences(name):
    assert _results()[name] < TOL
