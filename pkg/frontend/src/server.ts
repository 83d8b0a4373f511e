import { createApp } from "./app";

const port = Number(process.env.PORT ?? 4173);

const server = createApp().listen(port, () => {
  console.log(`fixture app listening on http://127.0.0.1:${port}/`);
});

// Fail fast when the port is taken instead of hanging the harness.
server.on("error", (err: NodeJS.ErrnoException) => {
  console.error(`fixture app failed to bind port ${port}: ${err.code ?? err.message}`);
  process.exit(1);
});
