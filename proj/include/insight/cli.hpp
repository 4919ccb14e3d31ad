#pragma once

// Command-line driver. Every subcommand reads and writes inside one run
// directory (--out):
//
//   pooled/            guided-pooled embeddings + manifest.tsv      (pool)
//   affinity_head/     affinity head checkpoint + log               (train-affinity)
//   sae/               SAE checkpoint, training_log.csv, summary    (train-sae)
//   codes/             per-image dense codes + index.tsv            (encode)
//   graph/             confidence matrix, graph.json, removals      (graph, export-graph)
//   names.tsv                                                       (name)
//   metrics/           metrics.json, labels.csv, concepts.csv       (metrics)
//   probe/             probe checkpoint, log, explanations          (probe)
//   segment/           per-image label maps and attributions        (segment)
//   report.json, report.svg                                         (report)
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.

#include <ostream>
#include <string>
#include <vector>

namespace insight::cli {

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace insight::cli
