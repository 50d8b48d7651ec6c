"""Parameter budgets of the six variants at desk and paper scale."""

from smad.model import VARIANTS, count_parameters, desk_preset, paper_preset

for label, base in (("desk", desk_preset()), ("paper", paper_preset())):
    print(f"{label} preset")
    for v in VARIANTS:
        cfg = base.for_variant(v)
        print(f"  {v:<22} {cfg.n_enc_layers:>2}+{cfg.n_dec_layers:<2} {cfg.ctc_placement:<5} {count_parameters(cfg):>12,}")
