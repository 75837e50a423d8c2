"""Fine-tunable parameters and MACs of the three benchmark backbones per rank factor.

    python demos/efficiency_tables.py
"""
from tuckersfda.configs import HHAR, MFD, SSC
from tuckersfda.factorize import RankPolicy, count_params, decompose_model, display, efficiency_report
from tuckersfda.model import MASK_PRESETS, build_model
from tuckersfda.peft import AdapterSpec, attach_adapters


def adapter_k(model, spec):
    a = attach_adapters(model, spec)
    return display(sum(count_params(a, MASK_PRESETS["adapter"]).values()), 1e3)


def main():
    for cfg in (SSC, HHAR, MFD):
        dense = build_model(cfg)
        base = efficiency_report(dense).summary()
        print(f"{cfg.name}: {base['params_full_K']}K params, {base['macs_full_M']}M MACs per sample")
        # the SSC row factorizes the input layer as well; HHAR/MFD keep its input mode whole
        full_rank_input = cfg is not SSC
        for rf in (2, 4, 8):
            fact = decompose_model(dense, RankPolicy(rf, input_layer_full_rank=full_rank_input, max_iters=1))
            s = efficiency_report(dense, fact).summary()
            print(f"  RF {rf}: core {s['params_finetunable_K']}K ({s['param_reduction_pct']}% fewer), "
                  f"{s['macs_fact_M']}M MACs ({s['mac_reduction_pct']}% fewer)")
        bn = display(sum(count_params(dense, MASK_PRESETS["bn"]).values()), 1e3)
        lora = ", ".join(f"r{r}: {adapter_k(dense, AdapterSpec('lora', r))}K" for r in (2, 4, 8, 16))
        print(f"  BN only {bn}K; LoRA {lora}; LoKrA {adapter_k(dense, AdapterSpec('lokra'))}K")


if __name__ == "__main__":
    main()
