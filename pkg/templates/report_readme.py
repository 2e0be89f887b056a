#!/usr/bin/env python3

def get_report_readme(config_hash, seeds, files):
    """
    README written into every report directory
    """
    listing = "\n".join(f"- {name}" for name in sorted(files))
    report_readme = f"""# MixFT report

Config hash: {config_hash}
Seeds: {", ".join(str(s) for s in seeds)}

## Files
{listing}

## Columns

mase.csv
- dataset: evaluation dataset name
- method: Base, Shared, mu-Datasets, MixFT (or an ablation variant; MixFT-other
  forecasts every context with the most likely adapter it was not routed to)
- seed: training seed, or `all` for the aggregate over seeds
- mean: mean MASE over the evaluation windows (per seed) or over seed means (`all`)
- stderr: standard error over windows (per seed) or over seeds (`all`)
- windows: number of windows with a defined MASE
- undefined: windows skipped because the seasonal-naive error of the context is zero

ranks.csv
- method: method name
- average_rank: mean placing over datasets, lower is better; ties share the mean rank
- rank_<dataset>: placing on each dataset

ranks_excluded.csv (only when a dataset was left out)
- dataset: dataset with no defined MASE window, so it takes no part in the ranking
- reason: why it was left out

entropy.csv
- dataset: dataset name, or `overall`
- windows: number of classified windows
- mean_entropy_bits: average classification entropy of the routing probabilities

timeline_<series>_<channel>.csv
- time_index: last observed step of the context window
- component: sub-domain the context is routed to (0-based)

component_examples.csv (ablation report)
- component: sub-domain (0-based)
- rank: 1 for the context routed there with the highest probability
- dataset, series, channel, start_index: where the context was cut from
- probability: routing probability of that component for the context

## Charts
SVG files share the CSV stem: mase.svg (bars per dataset and method),
elbo.svg (bound per iteration), timeline_*.svg (membership step plots),
component_examples.svg (example contexts per sub-domain).
"""
    return report_readme
