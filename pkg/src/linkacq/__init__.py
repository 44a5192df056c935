"""Compressive sequential acquisition of multiuser preamble links."""

from ._version import __version__
from .dictionary import (GridConfig, GramMatrix, LinkVector, TemplateBank,
                         ambiguity, build_template_bank, cross_gram,
                         cross_gram_columns, gram_matrix,
                         ground_truth_link_vector, linear_index,
                         phase_rotation, reference_shift, shift_link_vector,
                         triplet_from_index)
from .harness import (ExperimentConfig, ExperimentResult, MetricsRow,
                      MetricsTable, ReceiverSpec, TrialRecord,
                      build_experiment, calibrate_threshold,
                      complexity_report, emit_results, identification_rate,
                      load_config, noise_var_for_snr, parse_metrics, pd_at_pf,
                      rmse, roc_curve, run_experiment, run_trial)
from .receivers import (AcquisitionResult, CmsObservation, ExtractionPolicy,
                        SparseEstimate, WhitenedDictionary,
                        build_whitened_dictionary, cms_sample,
                        extract_components, extract_from_magnitudes,
                        likelihood_ratio, mf_acquire, mf_sample, omp_solve,
                        omp_solve_batch, sequential_acquire)
from .samplers import (KlReport, SamplerBank, SparkBound, avg_kl, identity_B,
                       kl_operator, kl_optimal_B, kl_report, pairwise_kl,
                       random_B, spark_lower_bound, with_noise_model)
from .waveforms import (ChannelRealization, Preamble, PulseShape, SampleStream,
                        Scenario, all_windows, default_preamble_set,
                        find_primitive_taps, gen_msequence, make_preamble,
                        sample_channel, stream_window, synthesize_received)

__all__ = [name for name in dir() if not name.startswith("_")]
