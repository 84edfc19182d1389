"""Straight-line scalar recomputation of the alignment losses.

Everything here works on plain Python floats pulled out of the engine's
diagnostics, one element at a time, so it shares no code path with the
vectorised tape ops it checks.
"""

import math

EPS = 1e-7


def ce(p, d):
    p = min(max(float(p), EPS), 1.0 - EPS)
    return -math.log(p) if d else -math.log(1.0 - p)


def flat(values):
    try:
        return [float(v) for v in values.ravel()]
    except AttributeError:
        return [float(values)]


def mean_ce(values, d):
    ps = flat(values)
    return sum(ce(p, d) for p in ps) / len(ps)


def masked_mean_ce(values, d, eta):
    ps = flat(values)
    return sum((eta * abs(p - 0.5) + 1.0) * ce(p, d) for p in ps) / len(ps)


def image_terms(probs, d, eta, mask=True, mask_transition=True):
    """Per-term values from a ``{adaptor id: probabilities}`` dict."""
    out = {}
    if "local" in probs:
        out["loc"] = masked_mean_ce(probs["local"], d, eta if mask else 0.0)
    if "transition_local" in probs:
        tr_eta = eta if (mask and mask_transition) else 0.0
        out["tr"] = masked_mean_ce(probs["transition_local"], d, tr_eta) + mean_ce(probs["transition_global"], d)
    if "global" in probs:
        out["global"] = mean_ce(probs["global"], d)
    return out


def instance_term(side_probs, d):
    """Mean CE per side, summed; an absent side contributes 0."""
    return sum(mean_ce(p, d) for p in side_probs.values())


def instance_terms(result, config):
    """Instance loss per domain key. The fg/bg sides that should be active are
    decided from the partition counts, so a missing side shows up as a
    KeyError rather than a silent 0."""
    if config.single_instance_disc:
        return {key: instance_term(result.instance_probs.get(key, {}), d) for key, d in (("s", 0), ("t", 1))}
    out = {"s": 0.0, "t": 0.0}
    for j, side in enumerate(("fg", "bg")):
        n = {key: result.counts.get(key, (0, 0))[j] for key in out}
        if sum(n.values()) <= 1:
            continue
        if config.paired_instance_terms and min(n.values()) == 0:
            continue
        for key, d in (("s", 0), ("t", 1)):
            if n[key]:
                out[key] += mean_ce(result.instance_probs[key][side], d)
    return out


def step_total(result, config):
    """Detection loss plus every alignment term of a training step."""
    total = float(result.terms["det"].data)
    for key, d in (("s", 0), ("t", 1)):
        terms = image_terms(result.probs.get(key, {}), d, config.eta, config.mask, config.mask_transition)
        total += sum(terms.values())
    return total + sum(instance_terms(result, config).values())
