#pragma once

#include <future>
#include <thread>
#include <type_traits>
#include <vector>

namespace sentinel {

/// Applies `fn` to every item, in parallel across hardware threads when
/// `parallel` is set. Results are collected in input order, so the output is
/// identical either way; the flag only trades wall-clock time.
template <typename T, typename Fn>
auto parallel_map(const std::vector<T>& items, Fn fn, bool parallel)
    -> std::vector<std::invoke_result_t<Fn, const T&>> {
  using Result = std::invoke_result_t<Fn, const T&>;
  std::vector<Result> results(items.size());
  if (items.empty()) return results;

  const unsigned hardware = std::thread::hardware_concurrency();
  const std::size_t workers =
      parallel ? std::min<std::size_t>(items.size(), hardware ? hardware : 2) : 1;
  if (workers <= 1) {
    for (std::size_t i = 0; i < items.size(); ++i) results[i] = fn(items[i]);
    return results;
  }

  std::vector<std::future<void>> futures;
  futures.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    futures.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < items.size(); i += workers) results[i] = fn(items[i]);
    }));
  }
  for (std::future<void>& f : futures) f.get();
  return results;
}

}  // namespace sentinel
